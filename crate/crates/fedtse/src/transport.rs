//! Message delivery between parties: an in-process deterministic channel for
//! tests and single-process runs, and a length-prefixed TCP framing for
//! multi-process runs. Both carry the same JSON message bodies, so a run's
//! transcript is identical across transports under the sequential scheduler.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::protocol::{Direction, PartyId, ProtocolMessage, Transcript};

/// A host-side connection to one guest.
pub trait Channel {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()>;
    fn recv(&mut self) -> Result<ProtocolMessage>;
}

/// Anything that can play the guest side of a connection in-process.
pub trait MessageHandler {
    fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>>;
}

impl MessageHandler for crate::protocol::guest::GuestState {
    fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        GuestState::handle(self, msg)
    }
}

use crate::protocol::guest::GuestState;

/// Deterministic in-process channel: `send` dispatches to the guest handler
/// immediately and queues its replies; `recv` pops the queue. This is the
/// sequential scheduler — no message reordering is possible.
pub struct InProcChannel<H: MessageHandler> {
    handler: Rc<RefCell<H>>,
    inbox: VecDeque<ProtocolMessage>,
}

impl<H: MessageHandler> InProcChannel<H> {
    pub fn new(handler: Rc<RefCell<H>>) -> Self {
        InProcChannel {
            handler,
            inbox: VecDeque::new(),
        }
    }
}

impl<H: MessageHandler> Channel for InProcChannel<H> {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        let replies = self.handler.borrow_mut().handle(msg.clone())?;
        self.inbox.extend(replies);
        Ok(())
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        self.inbox.pop_front().ok_or_else(|| {
            Error::Protocol("no queued message: sequential schedule out of sync".into())
        })
    }
}

/// Writes one frame: 4-byte big-endian length prefix, then the UTF-8 JSON
/// body.
pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<()> {
    let len = u32::try_from(body.len())
        .map_err(|_| Error::Transport("frame body exceeds u32 length".into()))?;
    w.write_all(&len.to_be_bytes())
        .and_then(|_| w.write_all(body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::Transport(format!("send failed: {e}")))
}

/// Reads one frame; a short body is a framing error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)
        .map_err(|e| Error::Transport(format!("connection lost reading frame length: {e}")))?;
    let len = u32::from_be_bytes(len_buf) as usize;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|e| Error::Transport(format!("frame shorter than its length prefix: {e}")))?;
    Ok(body)
}

pub fn encode_message(msg: &ProtocolMessage) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(msg)?)
}

pub fn decode_message(body: &[u8]) -> Result<ProtocolMessage> {
    serde_json::from_slice(body).map_err(|e| Error::Transport(format!("bad frame body: {e}")))
}

/// TCP transport with the frame format above.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> Self {
        TcpChannel { stream }
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Transport(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        Ok(TcpChannel { stream })
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        write_frame(&mut self.stream, &encode_message(msg)?)
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        decode_message(&read_frame(&mut self.stream)?)
    }
}

/// Wraps a channel and logs both directions into a shared transcript.
pub struct RecordingChannel {
    inner: Box<dyn Channel>,
    transcript: Rc<RefCell<Transcript>>,
    peer: PartyId,
}

impl RecordingChannel {
    pub fn new(inner: Box<dyn Channel>, transcript: Rc<RefCell<Transcript>>, peer: PartyId) -> Self {
        RecordingChannel {
            inner,
            transcript,
            peer,
        }
    }
}

impl Channel for RecordingChannel {
    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        self.transcript
            .borrow_mut()
            .log(Direction::Sent, self.peer, msg);
        self.inner.send(msg)
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        let msg = self.inner.recv()?;
        self.transcript
            .borrow_mut()
            .log(Direction::Received, self.peer, &msg);
        Ok(msg)
    }
}

/// Serves one guest over an accepted TCP connection: handle each incoming
/// message until the host signals the end of training or the peer hangs up.
pub fn serve_guest(stream: TcpStream, guest: &mut GuestState) -> Result<()> {
    let mut chan = TcpChannel::new(stream);
    loop {
        let msg = match chan.recv() {
            Ok(m) => m,
            Err(Error::Transport(e)) if guest.finished => {
                log::debug!("guest {}: connection closed after finish: {e}", guest.id);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let replies = guest.handle(msg)?;
        for reply in replies {
            chan.send(&reply)?;
        }
        if guest.finished {
            return Ok(());
        }
    }
}
