//! Reference-motion encoder, command encoder, low-level controller, terrain
//! adaptation module and value head, with hand-written backpropagation.
//!
//! Stage one maps `(reference window, o_p)` to a Gaussian latent `z` and
//! decodes `(z, o_p, o_e)` into 12 joint targets. Stage two freezes the
//! decoder, swaps the reference encoder for a command encoder and adds a
//! residual `α·tanh(π_TA(z, o_p, o_e))` gated by the height-patch spread.

pub mod checkpoint;
pub mod gaussian;
pub mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terrain::{patch_std_gate, ExteroPatch};
use crate::{COMMAND_DIM, EXTERO_DIM, LATENT_DIM, NUM_JOINTS, PROPRIO_DIM};
pub use checkpoint::{Checkpoint, CheckpointError, OptimizerState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gaussian::{kl_to_prior, sample_latent, GaussianLatent};
pub use mlp::{Activation, Dense, Mlp, MlpSpec, MlpTrace};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid state: {0}")]
    State(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Imitation,
    Adaptation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Conditioning width of the stage-one encoder (reference window features).
    pub cond_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub llc_hidden: Vec<usize>,
    pub ta_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    /// Width of the tanh compression applied to the height patch.
    pub extero_features: usize,
    pub activation: Activation,
    pub init_action_log_std: f64,
    /// Initial decoder output bias; empty means zeros.
    pub action_bias: Vec<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            cond_dim: crate::mocap::WINDOW_FEATURES,
            encoder_hidden: vec![256, 128],
            llc_hidden: vec![512, 256, 128],
            ta_hidden: vec![512, 256, 128],
            value_hidden: vec![256, 128],
            extero_features: 128,
            activation: Activation::Tanh,
            init_action_log_std: -1.6,
            action_bias: Vec::new(),
        }
    }
}

impl PolicyConfig {
    /// Uniform small networks, handy for tests and quick runs.
    pub fn small(width: usize, extero_features: usize) -> Self {
        Self {
            encoder_hidden: vec![width, width],
            llc_hidden: vec![width, width],
            ta_hidden: vec![width, width],
            value_hidden: vec![width, width],
            extero_features,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.cond_dim == 0 {
            return Err(PolicyError::Spec("cond_dim must be positive".into()));
        }
        if self.extero_features == 0 {
            return Err(PolicyError::Spec("extero_features must be positive".into()));
        }
        for (name, h) in [
            ("encoder_hidden", &self.encoder_hidden),
            ("llc_hidden", &self.llc_hidden),
            ("ta_hidden", &self.ta_hidden),
            ("value_hidden", &self.value_hidden),
        ] {
            if h.is_empty() || h.contains(&0) {
                return Err(PolicyError::Spec(format!("{name} needs at least one positive width")));
            }
        }
        if !self.action_bias.is_empty() && self.action_bias.len() != NUM_JOINTS {
            return Err(PolicyError::Dim { what: "action_bias", expected: NUM_JOINTS, got: self.action_bias.len() });
        }
        Ok(())
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), PolicyError> {
    if expected != got {
        return Err(PolicyError::Dim { what, expected, got });
    }
    Ok(())
}

/// MLP over `cond ⊕ o_p` with `mean` and `log_std` heads of width 8.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEncoder {
    pub cond_dim: usize,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderTrace {
    pub mlp: MlpTrace,
    pub raw_log_std: Vec<f64>,
}

impl GaussianEncoder {
    pub fn new<R: Rng + ?Sized>(
        cond_dim: usize,
        hidden: &[usize],
        act: Activation,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let spec = MlpSpec::new(cond_dim + PROPRIO_DIM, hidden, act, &[("mean", LATENT_DIM), ("log_std", LATENT_DIM)]);
        Ok(Self { cond_dim, mlp: Mlp::new(spec, 1.0, 1.0, rng)? })
    }

    pub fn forward(&self, cond: &[f64], proprio: &[f64]) -> Result<(GaussianLatent, EncoderTrace), PolicyError> {
        check_dim("encoder conditioning", self.cond_dim, cond.len())?;
        check_dim("proprioception", PROPRIO_DIM, proprio.len())?;
        let mut x = Vec::with_capacity(cond.len() + proprio.len());
        x.extend_from_slice(cond);
        x.extend_from_slice(proprio);
        let mlp = self.mlp.forward(&x)?;
        let (mean, raw) = mlp.output.split_at(LATENT_DIM);
        let g = GaussianLatent::from_raw(mean, raw);
        let raw_log_std = raw.to_vec();
        Ok((g, EncoderTrace { mlp, raw_log_std }))
    }

    /// Gradients w.r.t. μ and σ flow into the network; the log-std clamp blocks them outside its range.
    pub fn backward(
        &self,
        trace: &EncoderTrace,
        latent: &GaussianLatent,
        d_mean: &[f64; LATENT_DIM],
        d_std: &[f64; LATENT_DIM],
        grad: Option<&mut GaussianEncoder>,
    ) {
        let mut g = vec![0.0; 2 * LATENT_DIM];
        for i in 0..LATENT_DIM {
            g[i] = d_mean[i];
            let r = trace.raw_log_std[i];
            let inside = r > gaussian::LOG_STD_MIN && r < gaussian::LOG_STD_MAX;
            g[LATENT_DIM + i] = if inside { d_std[i] * latent.std[i] } else { 0.0 };
        }
        self.mlp.backward(&trace.mlp, &g, grad.map(|e| &mut e.mlp), false);
    }

    pub fn zeros_like(&self) -> Self {
        Self { cond_dim: self.cond_dim, mlp: self.mlp.zeros_like() }
    }
}

/// `lead ⊕ o_p ⊕ tanh(W_e o_e + b_e)` fed through an MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExteroNet {
    pub lead_dim: usize,
    pub compress: Dense,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExteroTrace {
    pub features: Vec<f64>,
    pub mlp: MlpTrace,
}

impl ExteroNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        lead_dim: usize,
        hidden: &[usize],
        features: usize,
        out: usize,
        out_name: &str,
        act: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let compress = Dense::orthogonal(EXTERO_DIM, features, 1.0, rng);
        let spec = MlpSpec::new(lead_dim + PROPRIO_DIM + features, hidden, act, &[(out_name, out)]);
        Ok(Self { lead_dim, compress, mlp: Mlp::new(spec, 1.0, output_gain, rng)? })
    }

    pub fn forward(&self, lead: &[f64], proprio: &[f64], extero: &[f64]) -> Result<(Vec<f64>, ExteroTrace), PolicyError> {
        check_dim("lead input", self.lead_dim, lead.len())?;
        check_dim("proprioception", PROPRIO_DIM, proprio.len())?;
        check_dim("exteroception", EXTERO_DIM, extero.len())?;
        let mut features = Vec::with_capacity(self.compress.out_dim);
        self.compress.forward_into(extero, &mut features);
        features.iter_mut().for_each(|f| *f = f.tanh());
        let mut x = Vec::with_capacity(self.mlp.input_dim());
        x.extend_from_slice(lead);
        x.extend_from_slice(proprio);
        x.extend_from_slice(&features);
        let mlp = self.mlp.forward(&x)?;
        Ok((mlp.output.clone(), ExteroTrace { features, mlp }))
    }

    /// Returns the gradient w.r.t. the lead input when `want_lead`.
    pub fn backward(
        &self,
        trace: &ExteroTrace,
        extero: &[f64],
        g_out: &[f64],
        grad: Option<&mut ExteroNet>,
        want_lead: bool,
    ) -> Option<Vec<f64>> {
        let (mlp_grad, compress_grad) = match grad {
            Some(g) => (Some(&mut g.mlp), Some(&mut g.compress)),
            None => (None, None),
        };
        let train_compress = compress_grad.is_some();
        if !want_lead && !train_compress {
            return None;
        }
        let gx = self.mlp.backward(&trace.mlp, g_out, mlp_grad, true).expect("input gradient");
        if let Some(cg) = compress_grad {
            let off = self.lead_dim + PROPRIO_DIM;
            let gf: Vec<f64> = trace.features.iter().enumerate().map(|(k, f)| gx[off + k] * (1.0 - f * f)).collect();
            self.compress.backward(extero, &gf, Some(cg), false);
        }
        want_lead.then(|| gx[..self.lead_dim].to_vec())
    }

    pub fn zeros_like(&self) -> Self {
        Self { lead_dim: self.lead_dim, compress: self.compress.zeros_like(), mlp: self.mlp.zeros_like() }
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut t = vec![&self.compress.weight, &self.compress.bias];
        t.extend(self.mlp.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = vec![&mut self.compress.weight, &mut self.compress.bias];
        t.extend(self.mlp.tensors_mut());
        t
    }

    fn tensor_names(&self, prefix: &str) -> Vec<String> {
        let mut n = vec![format!("{prefix}.compress.weight"), format!("{prefix}.compress.bias")];
        n.extend(self.mlp.tensor_names(&format!("{prefix}.mlp")));
        n
    }
}

/// Weights of every network plus the exploration log-std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub stage: Stage,
    pub reference_encoder: GaussianEncoder,
    pub command_encoder: Option<GaussianEncoder>,
    pub decoder: ExteroNet,
    pub adapter: Option<ExteroNet>,
    pub value: ExteroNet,
    pub action_log_std: Vec<f64>,
    pub llc_frozen: bool,
}

/// Inputs for one policy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    /// Reference window features (stage one) or encoded command (stage two).
    pub cond: Vec<f64>,
    pub proprio: Vec<f64>,
    pub extero: Vec<f64>,
    /// Residual gain from the height-patch gate; ignored in stage one.
    pub alpha: f64,
}

impl PolicyInput {
    /// Computes `alpha` from the patch.
    pub fn new(cond: Vec<f64>, proprio: Vec<f64>, extero: &ExteroPatch) -> Self {
        let (_, alpha) = patch_std_gate(extero);
        Self { cond, proprio, extero: extero.as_slice().to_vec(), alpha }
    }
}

/// Cached activations of a full forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyTrace {
    recorded: bool,
    pub latent: Option<GaussianLatent>,
    pub eps: [f64; LATENT_DIM],
    pub z: [f64; LATENT_DIM],
    encoder: EncoderTrace,
    decoder: ExteroTrace,
    adapter: Option<ExteroTrace>,
    /// `tanh(π_TA)` outputs, when the residual ran.
    pub residual: Option<Vec<f64>>,
    value: ExteroTrace,
    pub decoder_action: [f64; NUM_JOINTS],
    pub mean_action: [f64; NUM_JOINTS],
    pub value_estimate: f64,
    pub alpha: f64,
}

/// Loss gradients w.r.t. the outputs of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Upstream {
    pub d_action: [f64; NUM_JOINTS],
    pub d_value: f64,
    pub d_latent_mean: [f64; LATENT_DIM],
    pub d_latent_std: [f64; LATENT_DIM],
}

impl Default for Upstream {
    fn default() -> Self {
        Self { d_action: [0.0; NUM_JOINTS], d_value: 0.0, d_latent_mean: [0.0; LATENT_DIM], d_latent_std: [0.0; LATENT_DIM] }
    }
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self, PolicyError> {
        config.validate()?;
        let act = config.activation;
        let reference_encoder = GaussianEncoder::new(config.cond_dim, &config.encoder_hidden, act, rng)?;
        let mut decoder =
            ExteroNet::new(LATENT_DIM, &config.llc_hidden, config.extero_features, NUM_JOINTS, "action", act, 0.01, rng)?;
        if !config.action_bias.is_empty() {
            decoder.mlp.layers.last_mut().unwrap().bias.copy_from_slice(&config.action_bias);
        }
        let value = ExteroNet::new(config.cond_dim, &config.value_hidden, config.extero_features, 1, "value", act, 1.0, rng)?;
        Ok(Self {
            action_log_std: vec![config.init_action_log_std; NUM_JOINTS],
            config,
            stage: Stage::Imitation,
            reference_encoder,
            command_encoder: None,
            decoder,
            adapter: None,
            value,
            llc_frozen: false,
        })
    }

    /// Stage-two parameters: frozen decoder, fresh command encoder, adapter and value head.
    pub fn into_adaptation<R: Rng + ?Sized>(mut self, rng: &mut R) -> Result<Self, PolicyError> {
        let c = &self.config;
        let act = c.activation;
        self.command_encoder = Some(GaussianEncoder::new(COMMAND_DIM, &c.encoder_hidden, act, rng)?);
        self.adapter =
            Some(ExteroNet::new(LATENT_DIM, &c.ta_hidden, c.extero_features, NUM_JOINTS, "offset", act, 0.01, rng)?);
        self.value = ExteroNet::new(COMMAND_DIM, &c.value_hidden, c.extero_features, 1, "value", act, 1.0, rng)?;
        self.stage = Stage::Adaptation;
        self.llc_frozen = true;
        Ok(self)
    }

    pub fn cond_dim(&self) -> usize {
        match self.stage {
            Stage::Imitation => self.reference_encoder.cond_dim,
            Stage::Adaptation => COMMAND_DIM,
        }
    }

    fn active_encoder(&self) -> &GaussianEncoder {
        match self.stage {
            Stage::Imitation => &self.reference_encoder,
            Stage::Adaptation => self.command_encoder.as_ref().expect("stage-two params carry a command encoder"),
        }
    }

    /// `π_RM(z | window, o_p)`.
    pub fn encode_reference(&self, window: &[f64], proprio: &[f64]) -> Result<GaussianLatent, PolicyError> {
        Ok(self.reference_encoder.forward(window, proprio)?.0)
    }

    /// `π_C(z | c, o_p)`.
    pub fn encode_command(&self, command: &[f64], proprio: &[f64]) -> Result<GaussianLatent, PolicyError> {
        let enc = self.command_encoder.as_ref().ok_or_else(|| PolicyError::State("no command encoder in stage one".into()))?;
        Ok(enc.forward(command, proprio)?.0)
    }

    /// Mean joint targets from the low-level controller.
    pub fn decode_action(&self, z: &[f64], proprio: &[f64], extero: &[f64]) -> Result<[f64; NUM_JOINTS], PolicyError> {
        check_dim("latent", LATENT_DIM, z.len())?;
        let (out, _) = self.decoder.forward(z, proprio, extero)?;
        Ok(std::array::from_fn(|i| out[i]))
    }

    /// `a + α·tanh(π_TA(z, o_p, o_e))`; returns `a` untouched when `α = 0`.
    pub fn adapt_action(
        &self,
        z: &[f64],
        proprio: &[f64],
        extero: &[f64],
        action: &[f64; NUM_JOINTS],
        alpha: f64,
    ) -> Result<[f64; NUM_JOINTS], PolicyError> {
        check_dim("latent", LATENT_DIM, z.len())?;
        if alpha == 0.0 {
            return Ok(*action);
        }
        let ta = self.adapter.as_ref().ok_or_else(|| PolicyError::State("no adaptation module in stage one".into()))?;
        let (raw, _) = ta.forward(z, proprio, extero)?;
        Ok(std::array::from_fn(|i| action[i] + alpha * raw[i].tanh()))
    }

    pub fn value_estimate(&self, input: &PolicyInput) -> Result<f64, PolicyError> {
        Ok(self.value.forward(&input.cond, &input.proprio, &input.extero)?.0[0])
    }

    /// Full pass with latent noise `eps` (zeros give the mean latent).
    pub fn forward(&self, input: &PolicyInput, eps: &[f64; LATENT_DIM]) -> Result<PolicyTrace, PolicyError> {
        let (latent, encoder) = self.active_encoder().forward(&input.cond, &input.proprio)?;
        let z = latent.reparameterize(eps);
        let (dec, decoder) = self.decoder.forward(&z, &input.proprio, &input.extero)?;
        let decoder_action: [f64; NUM_JOINTS] = std::array::from_fn(|i| dec[i]);
        let mut mean_action = decoder_action;
        let mut adapter = None;
        let mut residual = None;
        let alpha = if self.stage == Stage::Adaptation { input.alpha } else { 0.0 };
        if alpha != 0.0 {
            let ta = self.adapter.as_ref().ok_or_else(|| PolicyError::State("missing adaptation module".into()))?;
            let (raw, tr) = ta.forward(&z, &input.proprio, &input.extero)?;
            let t: Vec<f64> = raw.iter().map(|r| r.tanh()).collect();
            for i in 0..NUM_JOINTS {
                mean_action[i] += alpha * t[i];
            }
            adapter = Some(tr);
            residual = Some(t);
        }
        let (v, value) = self.value.forward(&input.cond, &input.proprio, &input.extero)?;
        Ok(PolicyTrace {
            recorded: true,
            latent: Some(latent),
            eps: *eps,
            z,
            encoder,
            decoder,
            adapter,
            residual,
            value,
            decoder_action,
            mean_action,
            value_estimate: v[0],
            alpha,
        })
    }

    /// Accumulates parameter gradients of a scalar loss into `grads`.
    /// Frozen decoder tensors receive nothing; gradients still flow through them to `z`.
    pub fn backward(
        &self,
        input: &PolicyInput,
        trace: &PolicyTrace,
        upstream: &Upstream,
        grads: &mut PolicyParams,
    ) -> Result<(), PolicyError> {
        if !trace.recorded {
            return Err(PolicyError::State("backward called without a recorded forward pass".into()));
        }
        let latent = trace.latent.expect("recorded trace has a latent");
        let mut d_z = [0.0; LATENT_DIM];
        if let (Some(tr), Some(t)) = (&trace.adapter, &trace.residual) {
            let g: Vec<f64> = (0..NUM_JOINTS).map(|i| upstream.d_action[i] * trace.alpha * (1.0 - t[i] * t[i])).collect();
            let ta = self.adapter.as_ref().expect("adapter present");
            let gl = ta.backward(tr, &input.extero, &g, grads.adapter.as_mut(), true).expect("lead gradient");
            for i in 0..LATENT_DIM {
                d_z[i] += gl[i];
            }
        }
        let dec_grad = if self.llc_frozen { None } else { Some(&mut grads.decoder) };
        let gl = self
            .decoder
            .backward(&trace.decoder, &input.extero, &upstream.d_action, dec_grad, true)
            .expect("lead gradient");
        for i in 0..LATENT_DIM {
            d_z[i] += gl[i];
        }
        let d_mean: [f64; LATENT_DIM] = std::array::from_fn(|i| d_z[i] + upstream.d_latent_mean[i]);
        let d_std: [f64; LATENT_DIM] = std::array::from_fn(|i| d_z[i] * trace.eps[i] + upstream.d_latent_std[i]);
        match self.stage {
            Stage::Imitation => {
                self.reference_encoder.backward(&trace.encoder, &latent, &d_mean, &d_std, Some(&mut grads.reference_encoder))
            }
            Stage::Adaptation => self.command_encoder.as_ref().expect("command encoder").backward(
                &trace.encoder,
                &latent,
                &d_mean,
                &d_std,
                grads.command_encoder.as_mut(),
            ),
        }
        if upstream.d_value != 0.0 {
            self.value.backward(&trace.value, &input.extero, &[upstream.d_value], Some(&mut grads.value), false);
        }
        Ok(())
    }

    /// Same structure, every tensor zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            stage: self.stage,
            reference_encoder: self.reference_encoder.zeros_like(),
            command_encoder: self.command_encoder.as_ref().map(GaussianEncoder::zeros_like),
            decoder: self.decoder.zeros_like(),
            adapter: self.adapter.as_ref().map(ExteroNet::zeros_like),
            value: self.value.zeros_like(),
            action_log_std: vec![0.0; self.action_log_std.len()],
            llc_frozen: self.llc_frozen,
        }
    }

    /// Every tensor in a fixed order, with names and whether the optimiser may update it.
    pub fn tensor_names(&self) -> Vec<(String, bool)> {
        let imitation = self.stage == Stage::Imitation;
        let mut out: Vec<(String, bool)> =
            self.reference_encoder.mlp.tensor_names("reference_encoder").into_iter().map(|n| (n, imitation)).collect();
        if let Some(e) = &self.command_encoder {
            out.extend(e.mlp.tensor_names("command_encoder").into_iter().map(|n| (n, true)));
        }
        out.extend(self.decoder.tensor_names("decoder").into_iter().map(|n| (n, !self.llc_frozen)));
        if let Some(a) = &self.adapter {
            out.extend(a.tensor_names("adapter").into_iter().map(|n| (n, true)));
        }
        out.extend(self.value.tensor_names("value").into_iter().map(|n| (n, true)));
        out.push(("action_log_std".into(), true));
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut t = self.reference_encoder.mlp.tensors();
        if let Some(e) = &self.command_encoder {
            t.extend(e.mlp.tensors());
        }
        t.extend(self.decoder.tensors());
        if let Some(a) = &self.adapter {
            t.extend(a.tensors());
        }
        t.extend(self.value.tensors());
        t.push(&self.action_log_std);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = self.reference_encoder.mlp.tensors_mut();
        if let Some(e) = &mut self.command_encoder {
            t.extend(e.mlp.tensors_mut());
        }
        t.extend(self.decoder.tensors_mut());
        if let Some(a) = &mut self.adapter {
            t.extend(a.tensors_mut());
        }
        t.extend(self.value.tensors_mut());
        t.push(&mut self.action_log_std);
        t
    }

    /// Decoder tensors only, in order.
    pub fn decoder_tensors(&self) -> Vec<&Vec<f64>> {
        self.decoder.tensors()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
