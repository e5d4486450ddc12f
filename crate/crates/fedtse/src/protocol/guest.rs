//! Guest (mobility provider) state machine.
//!
//! A guest owns its features, its sub-model, and — in physics mode — its
//! measurement vectors and the inner-product-encryption master secret. It
//! reacts to host messages and never initiates a round.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::physloss::MeasurementModel;
use crate::secure_ip::{self, FixedPointCodec, IpePublicKey, IpeSecretKey};

use super::model::{party_seed, take_rows};
use super::{check_round_advance, PartyId, ProtocolMessage, SyncPurpose};

/// How a guest participates in the secure gradient term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuestMode {
    /// Supervised training: outputs and gradients only.
    Supervised,
    /// Physics mode with the plaintext reference backend: shares raw
    /// measurements for the batch.
    PhysicsPlain,
    /// Physics mode with inner-product encryption.
    PhysicsIpe,
}

pub struct GuestState {
    pub id: u32,
    pub net: DenseNet,
    /// Standardized features, all time steps.
    features: Array2<f64>,
    /// Raw measurement vectors (2N layout), physics mode only.
    measurements: Array2<f64>,
    /// Coverage masks aligned with `measurements`.
    masks: Vec<Vec<bool>>,
    /// The guest's measurement channels (shared configuration).
    models: Vec<MeasurementModel>,
    mode: GuestMode,
    q: usize,
    eta: f64,
    lambda: f64,
    config_hash: String,
    codec: Option<FixedPointCodec>,
    /// Master secret and public key, sized to the maximum stacked batch
    /// dimension; shorter batches zero-pad.
    ipe: Option<(IpeSecretKey, IpePublicKey)>,
    ipe_rng: ChaCha8Rng,
    last_round: u64,
    current_round: u64,
    awaiting_grads: bool,
    current_indices: Vec<usize>,
    current_pair_starts: Vec<usize>,
    pub finished: bool,
}

impl GuestState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        net: DenseNet,
        features: Array2<f64>,
        mode: GuestMode,
        q: usize,
        eta: f64,
        lambda: f64,
        config_hash: String,
        seed: u64,
    ) -> Self {
        let n_steps = features.nrows();
        GuestState {
            id,
            net,
            features,
            measurements: Array2::zeros((n_steps, 0)),
            masks: vec![Vec::new(); n_steps],
            models: Vec::new(),
            mode,
            q,
            eta,
            lambda,
            config_hash,
            codec: None,
            ipe: None,
            ipe_rng: ChaCha8Rng::seed_from_u64(party_seed(seed, &format!("guest_ipe_rng{id}"))),
            last_round: 0,
            current_round: 0,
            awaiting_grads: false,
            current_indices: Vec::new(),
            current_pair_starts: Vec::new(),
            finished: false,
        }
    }

    /// Installs the physics-mode data: measurement vectors, coverage masks
    /// and the shared measurement-model configuration.
    pub fn set_measurements(
        &mut self,
        measurements: Array2<f64>,
        masks: Vec<Vec<bool>>,
        models: Vec<MeasurementModel>,
    ) {
        self.measurements = measurements;
        self.masks = masks;
        self.models = models;
    }

    /// Installs the fixed-point codec and generates the master key at the
    /// maximum stacked dimension (2N · batch pairs).
    pub fn set_secure_params(&mut self, codec: FixedPointCodec, key_dim: usize, seed: u64) {
        let (sk, pk) = secure_ip::setup(
            key_dim.max(1),
            party_seed(seed, &format!("guest_ipe{}", self.id)),
        );
        self.codec = Some(codec);
        self.ipe = Some((sk, pk));
    }

    pub fn party(&self) -> PartyId {
        PartyId::Guest(self.id)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Sub-model outputs for arbitrary indices (local inference helper).
    pub fn forward_indices(&self, indices: &[usize]) -> Result<Array2<f64>> {
        self.net.forward(&take_rows(&self.features, indices))
    }

    /// Covered measurement values at `t` in the shared stacking order
    /// (models in configured order, covered cells ascending).
    fn covered_values(&self, t: usize) -> Vec<f64> {
        let n = self.measurements.ncols() / 2;
        let y_dummy = vec![0.0; 2 * n];
        crate::physloss::party_rows(
            &self.models,
            &y_dummy,
            &self.measurements.row(t).to_vec(),
            Some(&self.masks[t]),
            n,
        )
        .u
    }

    pub fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        match msg {
            ProtocolMessage::Hello {
                round, config_hash, ..
            } => {
                if config_hash != self.config_hash {
                    return Err(Error::Config(format!(
                        "configuration mismatch: host {config_hash} vs guest {}",
                        self.config_hash
                    )));
                }
                let mut out = vec![ProtocolMessage::Hello {
                    round,
                    sender: self.party(),
                    config_hash: self.config_hash.clone(),
                }];
                if let Some((_, pk)) = &self.ipe {
                    out.push(ProtocolMessage::IpPublicKey {
                        round,
                        sender: self.party(),
                        key: pk.h.iter().map(|&g| encode_u64(g)).collect(),
                    });
                }
                Ok(out)
            }
            ProtocolMessage::BatchSync {
                round,
                purpose,
                indices,
                pair_starts,
                ..
            } => {
                if purpose == SyncPurpose::Train {
                    check_round_advance(self.last_round, round)?;
                }
                let x = take_rows(&self.features, &indices);
                let z = self.net.forward(&x)?;
                let outputs = z.rows().into_iter().map(|r| r.to_vec()).collect();
                let mut out = vec![ProtocolMessage::SubOutput {
                    round,
                    sender: self.party(),
                    outputs,
                }];
                if purpose == SyncPurpose::Train {
                    self.last_round = round;
                    self.current_round = round;
                    self.awaiting_grads = true;
                    self.current_indices = indices;
                    self.current_pair_starts = pair_starts.clone();
                    if self.mode != GuestMode::Supervised {
                        let mask = pair_starts
                            .iter()
                            .map(|&t| self.masks[t].clone())
                            .collect();
                        out.push(ProtocolMessage::Coverage {
                            round,
                            sender: self.party(),
                            mask,
                        });
                        if self.mode == GuestMode::PhysicsPlain {
                            let values = pair_starts
                                .iter()
                                .map(|&t| self.measurements.row(t).to_vec())
                                .collect();
                            out.push(ProtocolMessage::PlainMeasurements {
                                round,
                                sender: self.party(),
                                values,
                            });
                        }
                    }
                }
                Ok(out)
            }
            ProtocolMessage::IpQueries {
                round,
                theta_cols,
                z_cols,
                ..
            } => {
                if round != self.current_round || !self.awaiting_grads {
                    return Err(Error::Protocol(format!(
                        "unexpected secure queries in round {round}"
                    )));
                }
                self.respond_ip_queries(round, theta_cols, z_cols)
            }
            ProtocolMessage::OutputGrad { round, grads, .. } => {
                if round != self.current_round || !self.awaiting_grads {
                    return Err(Error::Protocol(format!(
                        "output gradients for round {round} do not match the open round {}",
                        self.current_round
                    )));
                }
                if grads.len() != self.current_indices.len() {
                    return Err(Error::Dimension(
                        "gradient count does not match the synced batch".into(),
                    ));
                }
                self.awaiting_grads = false;
                self.local_updates(&grads)?;
                Ok(Vec::new())
            }
            ProtocolMessage::Finished { .. } => {
                self.finished = true;
                Ok(Vec::new())
            }
            other => Err(Error::Protocol(format!(
                "guest cannot handle message type '{}'",
                other.type_name()
            ))),
        }
    }

    /// Q local gradient steps with the stale output cotangent: ∂z/∂θ is
    /// recomputed at the current parameters each step while ∂L/∂z stays
    /// fixed.
    fn local_updates(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        let dz = self.net.output_dim();
        if grads.iter().any(|g| g.len() != dz) {
            return Err(Error::Dimension("output gradient dimension".into()));
        }
        let mut cot = Array2::zeros((grads.len(), dz));
        for (i, g) in grads.iter().enumerate() {
            cot.row_mut(i).assign(&Array1::from_vec(g.clone()));
        }
        let x = take_rows(&self.features, &self.current_indices);
        for _ in 0..self.q {
            super::model::descend(&mut self.net, &x, &cot, self.eta, self.lambda)?;
        }
        Ok(())
    }

    fn respond_ip_queries(
        &mut self,
        round: u64,
        theta_cols: Vec<Vec<i64>>,
        z_cols: Vec<Vec<i64>>,
    ) -> Result<Vec<ProtocolMessage>> {
        let codec = self
            .codec
            .clone()
            .ok_or_else(|| Error::Protocol("secure queries without codec".into()))?;
        let (sk, pk) = self
            .ipe
            .as_ref()
            .ok_or_else(|| Error::Protocol("secure queries without keys".into()))?;
        // stack covered measurements over the synced pair starts
        let mut stacked = Vec::new();
        for &t in &self.current_pair_starts {
            stacked.extend(self.covered_values(t));
        }
        let dim = stacked.len();
        let key_dim = sk.dim();
        if dim > key_dim {
            return Err(Error::Protocol(format!(
                "stacked dimension {dim} exceeds the session key dimension {key_dim}"
            )));
        }
        if theta_cols.iter().chain(z_cols.iter()).any(|c| c.len() != dim) {
            return Err(Error::Dimension(format!(
                "query columns do not match the stacked measurement dimension {dim}"
            )));
        }
        let stack_codec = FixedPointCodec::new(codec.scale_bits, codec.bound, key_dim)?;
        stacked.resize(key_dim, 0.0);
        let (qu, clipped) = stack_codec.quantize(&stacked)?;
        if clipped {
            log::warn!("guest {}: measurements clipped to codec bound", self.id);
        }
        let max_abs = (stack_codec.scale() * stack_codec.bound).round() as i64;
        let ct = secure_ip::encrypt(pk, &qu, max_abs, &mut self.ipe_rng)?;
        let pad = |col: &Vec<i64>| {
            let mut padded = col.clone();
            padded.resize(key_dim, 0);
            padded
        };
        let theta_keys = theta_cols
            .iter()
            .map(|a| sk.keygen(&pad(a)).map(encode_u64))
            .collect::<Result<Vec<_>>>()?;
        let z_keys = z_cols
            .iter()
            .map(|a| sk.keygen(&pad(a)).map(encode_u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![
            ProtocolMessage::IpCiphertext {
                round,
                sender: self.party(),
                c0: encode_u64(ct.c0),
                c: ct.c.iter().map(|&x| encode_u64(x)).collect(),
            },
            ProtocolMessage::IpKeys {
                round,
                sender: self.party(),
                theta_keys,
                z_keys,
            },
        ])
    }
}

/// Big-endian byte string, base64.
pub fn encode_u64(x: u64) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(x.to_be_bytes())
}

pub fn decode_u64(s: &str) -> Result<u64> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Protocol(format!("bad base64: {e}")))?;
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| Error::Protocol("expected 8-byte group element".into()))?;
    Ok(u64::from_be_bytes(arr))
}
