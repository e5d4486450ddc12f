//! The vertical federated training protocol: message vocabulary, transcript
//! recording and the structural privacy audit.
//!
//! Parties are isolated state machines exchanging only `ProtocolMessage`s.
//! The host never sees guest features; guests never see the host's labels or
//! loss internals beyond the output gradients addressed to them.

pub mod guest;
pub mod host;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identifies a protocol participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartyId {
    Host,
    Guest(u32),
}

impl std::fmt::Display for PartyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartyId::Host => write!(f, "host"),
            PartyId::Guest(k) => write!(f, "guest:{k}"),
        }
    }
}

impl Serialize for PartyId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PartyId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == "host" {
            return Ok(PartyId::Host);
        }
        if let Some(k) = raw.strip_prefix("guest:") {
            if let Ok(k) = k.parse() {
                return Ok(PartyId::Guest(k));
            }
        }
        Err(serde::de::Error::custom(format!("bad party id '{raw}'")))
    }
}

/// Whether a batch sync drives a training round or a read-only evaluation
/// pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncPurpose {
    Train,
    Eval,
}

/// Everything that crosses a party boundary. Every variant carries the round
/// number and the sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolMessage {
    /// Handshake: parties must agree on the configuration digest.
    Hello {
        round: u64,
        sender: PartyId,
        config_hash: String,
    },
    /// Host fixes the time indices every party trains on this round. For
    /// physics rounds `pair_starts` lists the consecutive-pair origins in
    /// stacking order.
    BatchSync {
        round: u64,
        sender: PartyId,
        purpose: SyncPurpose,
        indices: Vec<usize>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        pair_starts: Vec<usize>,
    },
    /// Guest sub-model outputs, one vector per requested index.
    SubOutput {
        round: u64,
        sender: PartyId,
        outputs: Vec<Vec<f64>>,
    },
    /// Loss gradients with respect to a guest's outputs, one per index.
    OutputGrad {
        round: u64,
        sender: PartyId,
        grads: Vec<Vec<f64>>,
    },
    /// Guest measurement coverage for the requested pair starts (physics
    /// rounds); which entries exist, never their values.
    Coverage {
        round: u64,
        sender: PartyId,
        mask: Vec<Vec<bool>>,
    },
    /// Plaintext-backend reference path: the guest shares its raw covered
    /// measurements for the batch. Deliberately not private.
    PlainMeasurements {
        round: u64,
        sender: PartyId,
        values: Vec<Vec<f64>>,
    },
    /// Guest's inner-product-encryption public key, published at handshake.
    IpPublicKey {
        round: u64,
        sender: PartyId,
        key: Vec<String>,
    },
    /// Host query columns (quantized) for the secure term: θ columns over
    /// the stacked batch and per-pair z columns.
    IpQueries {
        round: u64,
        sender: PartyId,
        theta_cols: Vec<Vec<i64>>,
        z_cols: Vec<Vec<i64>>,
    },
    /// Guest ciphertext of its stacked quantized measurement vector.
    IpCiphertext {
        round: u64,
        sender: PartyId,
        c0: String,
        c: Vec<String>,
    },
    /// Functional keys for the submitted query columns (base64, big-endian).
    IpKeys {
        round: u64,
        sender: PartyId,
        theta_keys: Vec<String>,
        z_keys: Vec<String>,
    },
    /// A party declines to continue the secure computation this round.
    Refusal {
        round: u64,
        sender: PartyId,
        reason: String,
    },
    /// Host signals the end of training.
    Finished { round: u64, sender: PartyId },
}

impl ProtocolMessage {
    pub fn round(&self) -> u64 {
        match self {
            ProtocolMessage::Hello { round, .. }
            | ProtocolMessage::BatchSync { round, .. }
            | ProtocolMessage::SubOutput { round, .. }
            | ProtocolMessage::OutputGrad { round, .. }
            | ProtocolMessage::Coverage { round, .. }
            | ProtocolMessage::PlainMeasurements { round, .. }
            | ProtocolMessage::IpPublicKey { round, .. }
            | ProtocolMessage::IpQueries { round, .. }
            | ProtocolMessage::IpCiphertext { round, .. }
            | ProtocolMessage::IpKeys { round, .. }
            | ProtocolMessage::Refusal { round, .. }
            | ProtocolMessage::Finished { round, .. } => *round,
        }
    }

    pub fn sender(&self) -> PartyId {
        match self {
            ProtocolMessage::Hello { sender, .. }
            | ProtocolMessage::BatchSync { sender, .. }
            | ProtocolMessage::SubOutput { sender, .. }
            | ProtocolMessage::OutputGrad { sender, .. }
            | ProtocolMessage::Coverage { sender, .. }
            | ProtocolMessage::PlainMeasurements { sender, .. }
            | ProtocolMessage::IpPublicKey { sender, .. }
            | ProtocolMessage::IpQueries { sender, .. }
            | ProtocolMessage::IpCiphertext { sender, .. }
            | ProtocolMessage::IpKeys { sender, .. }
            | ProtocolMessage::Refusal { sender, .. }
            | ProtocolMessage::Finished { sender, .. } => *sender,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ProtocolMessage::Hello { .. } => "hello",
            ProtocolMessage::BatchSync { .. } => "batch_sync",
            ProtocolMessage::SubOutput { .. } => "sub_output",
            ProtocolMessage::OutputGrad { .. } => "output_grad",
            ProtocolMessage::Coverage { .. } => "coverage",
            ProtocolMessage::PlainMeasurements { .. } => "plain_measurements",
            ProtocolMessage::IpPublicKey { .. } => "ip_public_key",
            ProtocolMessage::IpQueries { .. } => "ip_queries",
            ProtocolMessage::IpCiphertext { .. } => "ip_ciphertext",
            ProtocolMessage::IpKeys { .. } => "ip_keys",
            ProtocolMessage::Refusal { .. } => "refusal",
            ProtocolMessage::Finished { .. } => "finished",
        }
    }

    /// Dimensions of the real-valued vectors carried by this message, used
    /// by the structural audit.
    pub fn vector_dims(&self) -> Vec<usize> {
        match self {
            ProtocolMessage::SubOutput { outputs, .. } => {
                outputs.iter().map(|v| v.len()).collect()
            }
            ProtocolMessage::OutputGrad { grads, .. } => grads.iter().map(|v| v.len()).collect(),
            ProtocolMessage::PlainMeasurements { values, .. } => {
                values.iter().map(|v| v.len()).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Which way a transcript entry crossed the host boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Sent,
    Received,
}

/// One logged message: metadata plus a payload digest; full payloads only
/// behind the recording flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub direction: Direction,
    pub peer: PartyId,
    pub message_type: String,
    pub round: u64,
    pub sender: PartyId,
    pub digest: String,
    pub vector_dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

/// Append-only host-side log of every message sent or received.
#[derive(Debug, Default, Clone)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
    pub record_payloads: bool,
}

impl Transcript {
    pub fn new(record_payloads: bool) -> Self {
        Transcript {
            entries: Vec::new(),
            record_payloads,
        }
    }

    pub fn log(&mut self, direction: Direction, peer: PartyId, msg: &ProtocolMessage) {
        let json = serde_json::to_vec(msg).expect("messages serialize");
        let digest = hex_digest(&json);
        self.entries.push(TranscriptEntry {
            seq: self.entries.len() as u64,
            direction,
            peer,
            message_type: msg.type_name().to_string(),
            round: msg.round(),
            sender: msg.sender(),
            digest,
            vector_dims: msg.vector_dims(),
            payload: if self.record_payloads {
                Some(serde_json::to_value(msg).expect("messages serialize"))
            } else {
                None
            },
        });
    }

    /// JSON-lines export.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        use std::io::BufRead;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Transcript {
            entries,
            record_payloads: false,
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Message types a run is allowed to produce, by training mode and secure
/// backend.
pub fn message_whitelist(physics: bool, ipe: bool) -> std::collections::BTreeSet<&'static str> {
    let mut set: std::collections::BTreeSet<&'static str> =
        ["hello", "batch_sync", "sub_output", "output_grad", "finished"]
            .into_iter()
            .collect();
    if physics {
        set.insert("coverage");
        if ipe {
            set.insert("ip_public_key");
            set.insert("ip_queries");
            set.insert("ip_ciphertext");
            set.insert("ip_keys");
            set.insert("refusal");
        } else {
            set.insert("plain_measurements");
        }
    }
    set
}

/// What the audit expects of a run.
#[derive(Debug, Clone)]
pub struct AuditExpectations {
    pub whitelist: std::collections::BTreeSet<&'static str>,
    /// Registered sub-model output dimension per guest.
    pub guest_output_dim: usize,
    /// Raw feature dimension per guest.
    pub guest_feature_dims: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub messages_checked: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Structural privacy audit of a transcript: only whitelisted message types
/// appear, and every guest-originated output vector has the registered
/// sub-model dimension, strictly below the guest's raw feature dimension.
/// A payload whose vectors match a guest's feature dimension is flagged as a
/// raw-feature leak.
pub fn audit_transcript(transcript: &Transcript, expect: &AuditExpectations) -> AuditReport {
    let mut report = AuditReport::default();
    for entry in &transcript.entries {
        report.messages_checked += 1;
        if !expect.whitelist.contains(entry.message_type.as_str()) {
            report.violations.push(format!(
                "seq {}: message type '{}' is not whitelisted",
                entry.seq, entry.message_type
            ));
        }
        if let PartyId::Guest(k) = entry.sender {
            let feat_dim = expect
                .guest_feature_dims
                .get(k as usize)
                .copied()
                .unwrap_or(usize::MAX);
            if entry.message_type == "sub_output" {
                for &dim in &entry.vector_dims {
                    if dim != expect.guest_output_dim {
                        report.violations.push(format!(
                            "seq {}: guest {k} emitted a {dim}-dim vector, registered output dim is {}",
                            entry.seq, expect.guest_output_dim
                        ));
                    }
                    if dim >= feat_dim {
                        report.violations.push(format!(
                            "seq {}: guest {k} payload dimension {dim} reaches its feature dimension {feat_dim}",
                            entry.seq
                        ));
                    }
                }
            } else {
                for &dim in &entry.vector_dims {
                    if dim >= feat_dim {
                        report.violations.push(format!(
                            "seq {}: guest {k} payload dimension {dim} reaches its feature dimension {feat_dim}",
                            entry.seq
                        ));
                    }
                }
            }
        }
    }
    report
}

/// Canonical JSON (sorted keys) digest of a serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let canon = canonicalize(&v);
    Ok(hex_digest(canon.to_string().as_bytes()))
}

fn canonicalize(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: std::collections::BTreeMap<_, _> =
                map.iter().map(|(k, val)| (k.clone(), canonicalize(val))).collect();
            serde_json::to_value(sorted).unwrap()
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.iter().map(canonicalize).collect())
        }
        other => other.clone(),
    }
}

/// Validates the round counter a party sees: rounds must strictly increase
/// across syncs.
pub fn check_round_advance(expected_gt: u64, got: u64) -> Result<()> {
    if got <= expected_gt {
        return Err(Error::Protocol(format!(
            "stale or replayed round {got}, already past {expected_gt}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_json_shape_and_roundtrip() {
        let msg = ProtocolMessage::BatchSync {
            round: 3,
            sender: PartyId::Host,
            purpose: SyncPurpose::Train,
            indices: vec![5, 9],
            pair_starts: vec![5],
        };
        let json = serde_json::to_value(&msg).unwrap();
        assert_eq!(json["type"], "batch_sync");
        assert_eq!(json["round"], 3);
        assert_eq!(json["sender"], "host");
        let back: ProtocolMessage = serde_json::from_value(json).unwrap();
        assert_eq!(back, msg);

        // unknown type rejected
        let bad = r#"{"type":"bogus","round":1,"sender":"host"}"#;
        assert!(serde_json::from_str::<ProtocolMessage>(bad).is_err());
    }

    #[test]
    fn party_id_serialization() {
        let g = PartyId::Guest(2);
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, "\"guest:2\"");
        assert_eq!(serde_json::from_str::<PartyId>(&s).unwrap(), g);
        assert!(serde_json::from_str::<PartyId>("\"guest:x\"").is_err());
    }

    #[test]
    fn transcript_logs_and_audit_flags_leaks() {
        let mut t = Transcript::new(false);
        let ok = ProtocolMessage::SubOutput {
            round: 1,
            sender: PartyId::Guest(0),
            outputs: vec![vec![1.0, 2.0, 3.0]],
        };
        t.log(Direction::Received, PartyId::Guest(0), &ok);
        let expect = AuditExpectations {
            whitelist: message_whitelist(false, false),
            guest_output_dim: 3,
            guest_feature_dims: vec![10],
        };
        assert!(audit_transcript(&t, &expect).is_clean());

        // inject a raw feature vector: dimension equals the feature dim
        let leak = ProtocolMessage::SubOutput {
            round: 2,
            sender: PartyId::Guest(0),
            outputs: vec![vec![0.0; 10]],
        };
        t.log(Direction::Received, PartyId::Guest(0), &leak);
        let report = audit_transcript(&t, &expect);
        assert_eq!(report.violations.len(), 2); // wrong dim + feature-dim match

        // non-whitelisted type
        let stray = ProtocolMessage::PlainMeasurements {
            round: 2,
            sender: PartyId::Guest(0),
            values: vec![],
        };
        t.log(Direction::Received, PartyId::Guest(0), &stray);
        let report = audit_transcript(&t, &expect);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("not whitelisted")));
    }

    #[test]
    fn config_hash_is_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":[{"y":2,"x":3}]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":[{"x":3,"y":2}],"a":1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn round_advance_contract() {
        assert!(check_round_advance(3, 4).is_ok());
        assert!(check_round_advance(3, 3).is_err());
        assert!(check_round_advance(3, 2).is_err());
    }
}
