//! Binarized GCN-style layer stack with configurable aggregation.
//!
//! A layer either transforms then aggregates or aggregates then
//! transforms. Binary layers binarize their input features and
//! weights and run the transform on the packed XNOR kernel; the first
//! and last layer stay full precision, as does the mean-pool readout
//! head. Meta modes attach a per-layer 1-bit auto-encoder whose output
//! drives the selector (GNA) or the diffused aggregator (ANA).

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregators::{self, MIXED_STANDARD};
use crate::binarize::{bit_linear, pack, sign_binarize, unpack, PackedBitMatrix};
use crate::config::{AggMode, ConfigError, LayerOrder, ModelConfig, PrecisionMode, TaskKind};
use crate::graph::{Graph, GraphBatch};
use crate::matrix::Matrix;
use crate::meta::{
    ana_aggregate, ana_hybrid_aggregate, gna_aggregate, gna_select, hybrid_raw_width,
    select_aggregate, BetaMap, BinaryGraphAutoEncoder, GumbelSampler, SelectMode,
};
use crate::tape::{Tape, Var};
use crate::{cast, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature width {got} does not match model input width {expected}")]
    FeatDimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("embedded config invalid: {0}")]
    Config(#[from] ConfigError),
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Full,
    Binary,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub order: LayerOrder,
    pub precision: Precision,
    pub agg: AggMode,
}

#[derive(Debug, Clone)]
pub struct Layer<F: Scalar> {
    spec: LayerSpec,
    weight: Matrix<F>,
    bias: Option<Matrix<F>>,
    encoder: Option<BinaryGraphAutoEncoder<F>>,
}

impl<F: Scalar> Layer<F> {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weight(&self) -> &Matrix<F> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Matrix<F>> {
        self.bias.as_ref()
    }

    pub fn encoder(&self) -> Option<&BinaryGraphAutoEncoder<F>> {
        self.encoder.as_ref()
    }

    #[cfg(test)]
    pub(crate) fn set_weight(&mut self, w: Matrix<F>) {
        self.weight = w;
    }
}

/// Everything one forward pass produces.
pub struct ForwardOutput<'t, F: Scalar> {
    /// `[num_graphs x out_dim]` readout predictions.
    pub prediction: Var<'t, F>,
    /// Final per-node features, for node-level heads and equivariance
    /// checks.
    pub node_features: Var<'t, F>,
    /// Tape ids of the registered parameters, aligned with
    /// [`BinGnnModel::params_mut`].
    pub param_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BinGnnModel<F: Scalar> {
    config: ModelConfig,
    feat_dim: usize,
    out_dim: usize,
    layers: Vec<Layer<F>>,
    head_w: Matrix<F>,
    head_b: Matrix<F>,
}

fn uniform_init<F: Scalar>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Matrix<F> {
    // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] keeps latents inside
    // the STE pass-through band at the start.
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| cast::<F>(rng.gen_range(-bound..bound)))
}

fn encoder_width(agg: AggMode) -> Option<usize> {
    match agg {
        AggMode::Gna => Some(aggregators::POOL.len()),
        AggMode::Ana => Some(1),
        AggMode::AnaHybrid(h) => Some(hybrid_raw_width(h)),
        _ => None,
    }
}

/// Width multiplier the aggregation applies to its input.
fn agg_width_factor(agg: AggMode) -> usize {
    match agg {
        AggMode::MixedConcat => MIXED_STANDARD.len(),
        _ => 1,
    }
}

impl<F: Scalar> BinGnnModel<F> {
    /// Builds and seeds a model. `feat_dim`/`out_dim` must be resolved
    /// (non-zero); they are stored back into the embedded config.
    pub fn new(config: &ModelConfig, feat_dim: usize, out_dim: usize) -> Result<Self, ModelError> {
        config.validate()?;
        assert!(feat_dim > 0 && out_dim > 0, "dims must be resolved before model build");
        let mut config = config.clone();
        config.feat_dim = feat_dim;
        config.out_dim = out_dim;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.layers);
        let mut width = feat_dim;
        for l in 0..config.layers {
            let precision = match config.precision {
                PrecisionMode::Full => Precision::Full,
                PrecisionMode::Binary => {
                    if l == 0 || l == config.layers - 1 {
                        Precision::Full
                    } else {
                        Precision::Binary
                    }
                }
            };
            let hidden = config.hidden_dim;
            // Transform-first aggregates the transformed features, so a
            // concat mode widens the layer output; aggregate-first
            // widens the transform input instead.
            let (w_in, layer_out) = match config.order {
                LayerOrder::TransformFirst => (width, hidden * agg_width_factor(config.agg_mode)),
                LayerOrder::AggregateFirst => (width * agg_width_factor(config.agg_mode), hidden),
            };
            let weight = uniform_init(w_in, hidden, w_in, &mut rng);
            let bias = config.bias.then(|| Matrix::zeros(1, hidden));
            let encoder = encoder_width(config.agg_mode)
                .map(|w| BinaryGraphAutoEncoder::new(width, w, config.bias, &mut rng));
            layers.push(Layer {
                spec: LayerSpec {
                    in_dim: width,
                    out_dim: hidden,
                    order: config.order,
                    precision,
                    agg: config.agg_mode,
                },
                weight,
                bias,
                encoder,
            });
            width = layer_out;
        }
        let head_w = uniform_init(width, out_dim, width, &mut rng);
        let head_b = Matrix::zeros(1, out_dim);
        Ok(Self { config, feat_dim, out_dim, layers, head_w, head_b })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn head_weight(&self) -> &Matrix<F> {
        &self.head_w
    }

    pub fn head_bias(&self) -> &Matrix<F> {
        &self.head_b
    }

    /// All trainable tensors in a stable order: per layer `[weight,
    /// bias?, encoder weight, encoder bias?]`, then the head weight and
    /// bias. Forward registers tape leaves in exactly this order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            if let Some(b) = layer.bias.as_mut() {
                out.push(b);
            }
            if let Some(enc) = layer.encoder.as_mut() {
                out.extend(enc.params_mut());
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn snapshot_params(&mut self) -> Vec<Matrix<F>> {
        self.params_mut().into_iter().map(|m| m.clone()).collect()
    }

    pub fn restore_params(&mut self, snapshot: &[Matrix<F>]) {
        let params = self.params_mut();
        assert_eq!(params.len(), snapshot.len(), "snapshot shape mismatch");
        for (p, s) in params.into_iter().zip(snapshot) {
            *p = s.clone();
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<F>,
        batch: &GraphBatch<F>,
        mode: Mode,
        sampler: &mut GumbelSampler,
    ) -> Result<ForwardOutput<'t, F>, ModelError> {
        self.forward_impl(tape, batch, mode, sampler, true)
    }

    fn forward_impl<'t>(
        &self,
        tape: &'t Tape<F>,
        batch: &GraphBatch<F>,
        mode: Mode,
        sampler: &mut GumbelSampler,
        use_kernel: bool,
    ) -> Result<ForwardOutput<'t, F>, ModelError> {
        let g = batch.graph();
        if g.feat_dim() != self.feat_dim {
            return Err(ModelError::FeatDimMismatch {
                expected: self.feat_dim,
                got: g.feat_dim(),
            });
        }
        let beta_map = BetaMap::new(
            cast::<F>(self.config.beta_min),
            cast::<F>(self.config.beta_max),
        );
        let mut param_ids = Vec::new();
        let mut x = tape.leaf(g.features().clone());
        for layer in &self.layers {
            x = layer_forward(
                layer, tape, g, x, mode, sampler, &beta_map, use_kernel, &mut param_ids,
            );
        }
        let node_features = x;
        let pooled = x.segment_mean(batch.segments().clone(), batch.num_graphs());
        let hw = tape.leaf(self.head_w.clone());
        param_ids.push(hw.id());
        let hb = tape.leaf(self.head_b.clone());
        param_ids.push(hb.id());
        let prediction = pooled.matmul(hw).add_bias(hb);
        Ok(ForwardOutput { prediction, node_features, param_ids })
    }

    /// Runs the same eval forward on the packed kernel and on the float
    /// path through identical binarized operands; they must agree
    /// exactly. Called once per epoch by the training loop.
    pub fn kernel_matches_float_path(&self, batch: &GraphBatch<F>) -> bool {
        let mut s1 = GumbelSampler::new(0, 1.0);
        let mut s2 = GumbelSampler::new(0, 1.0);
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = self
            .forward_impl(&t1, batch, Mode::Eval, &mut s1, true)
            .expect("spot check forward");
        let b = self
            .forward_impl(&t2, batch, Mode::Eval, &mut s2, false)
            .expect("spot check forward");
        a.node_features.value() == b.node_features.value()
            && a.prediction.value() == b.prediction.value()
    }

    /// Size accounting that mirrors the checkpoint serialization: full
    /// weights cost 32 bits each, binary weights one bit plus word
    /// padding, biases are always full precision.
    pub fn inspect(&self) -> SizeReport {
        let mut rows = Vec::new();
        let mut param_count = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w_in, w_out) = layer.weight.shape();
            let weight_params = w_in * w_out;
            let weight_bits = match layer.spec.precision {
                Precision::Full => 32 * weight_params,
                // Kernel orientation: out rows, ceil(in/64) words each.
                Precision::Binary => w_out * w_in.div_ceil(64) * 64,
            };
            let bias_params = layer.bias.as_ref().map_or(0, Matrix::cols);
            let mut enc_params = 0;
            let mut enc_bits = 0;
            if let Some(enc) = &layer.encoder {
                let (e_in, e_out) = enc.weight().shape();
                enc_params = e_in * e_out;
                enc_bits = e_out * e_in.div_ceil(64) * 64;
                if let Some(b) = enc.bias() {
                    enc_params += b.cols();
                    enc_bits += 32 * b.cols();
                }
            }
            param_count += weight_params + bias_params + enc_params;
            rows.push(SizeRow {
                name: format!(
                    "layer{} ({}{})",
                    i,
                    match layer.spec.precision {
                        Precision::Full => "full",
                        Precision::Binary => "binary",
                    },
                    if layer.encoder.is_some() { "+enc" } else { "" }
                ),
                bits: weight_bits + 32 * bias_params + enc_bits,
                binary: layer.spec.precision == Precision::Binary,
                encoder_bits: enc_bits,
            });
        }
        let head_params = self.head_w.rows() * self.head_w.cols() + self.head_b.cols();
        param_count += head_params;
        rows.push(SizeRow {
            name: "head (full)".into(),
            bits: 32 * head_params,
            binary: false,
            encoder_bits: 0,
        });
        SizeReport { rows, param_count }
    }

    /// Writes the checkpoint: magic, version, embedded config, then per
    /// layer the weights (f32 for full layers, packed sign bits in
    /// kernel orientation for binary layers), biases and encoder block.
    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"B1GN");
        put_u32(&mut buf, 1);
        let cfg = self.config.to_text();
        put_u32(&mut buf, cfg.len() as u32);
        buf.extend_from_slice(cfg.as_bytes());
        put_u32(&mut buf, self.feat_dim as u32);
        put_u32(&mut buf, self.out_dim as u32);
        put_u32(&mut buf, self.layers.len() as u32);
        for layer in &self.layers {
            buf.push(match layer.spec.precision {
                Precision::Full => 0,
                Precision::Binary => 1,
            });
            let (w_in, w_out) = layer.weight.shape();
            put_u32(&mut buf, w_in as u32);
            put_u32(&mut buf, w_out as u32);
            match layer.spec.precision {
                Precision::Full => put_f32_matrix(&mut buf, &layer.weight),
                Precision::Binary => {
                    let signs = layer.weight.map(crate::binarize::sign);
                    let packed = pack(&signs.transpose()).expect("sign output is ±1");
                    put_packed(&mut buf, &packed);
                }
            }
            put_opt_f32_matrix(&mut buf, layer.bias.as_ref());
            match &layer.encoder {
                None => buf.push(0),
                Some(enc) => {
                    buf.push(1);
                    put_u32(&mut buf, enc.out_width() as u32);
                    let signs = enc.weight().map(crate::binarize::sign);
                    let packed = pack(&signs.transpose()).expect("sign output is ±1");
                    put_packed(&mut buf, &packed);
                    put_opt_f32_matrix(&mut buf, enc.bias());
                }
            }
        }
        put_u32(&mut buf, self.head_w.rows() as u32);
        put_u32(&mut buf, self.head_w.cols() as u32);
        put_f32_matrix(&mut buf, &self.head_w);
        put_f32_matrix(&mut buf, &self.head_b);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CkptError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != b"B1GN" {
            return Err(CkptError::BadMagic);
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(CkptError::BadVersion(version));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text =
            String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| CkptError::Truncated)?;
        let config = ModelConfig::parse(&cfg_text)?;
        let feat_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let num_layers = r.u32()? as usize;

        let mut layers = Vec::with_capacity(num_layers);
        let mut width = feat_dim;
        for _ in 0..num_layers {
            let precision = match r.u8()? {
                0 => Precision::Full,
                1 => Precision::Binary,
                _ => return Err(CkptError::Truncated),
            };
            let w_in = r.u32()? as usize;
            let w_out = r.u32()? as usize;
            let weight = match precision {
                Precision::Full => r.f32_matrix(w_in, w_out)?,
                // Binary layers persist sign bits; ±1 latents reproduce
                // the same binarized forward exactly.
                Precision::Binary => unpack::<F>(&r.packed()?).transpose(),
            };
            let bias = r.opt_f32_matrix()?;
            let encoder = match r.u8()? {
                0 => None,
                1 => {
                    let _out_width = r.u32()? as usize;
                    let enc_w = unpack::<F>(&r.packed()?).transpose();
                    let enc_b = r.opt_f32_matrix()?;
                    Some(BinaryGraphAutoEncoder::from_parts(enc_w, enc_b))
                }
                _ => return Err(CkptError::Truncated),
            };
            let layer_out = match config.order {
                LayerOrder::TransformFirst => w_out * agg_width_factor(config.agg_mode),
                LayerOrder::AggregateFirst => w_out,
            };
            layers.push(Layer {
                spec: LayerSpec {
                    in_dim: width,
                    out_dim: w_out,
                    order: config.order,
                    precision,
                    agg: config.agg_mode,
                },
                weight,
                bias,
                encoder,
            });
            width = layer_out;
        }
        let h_in = r.u32()? as usize;
        let h_out = r.u32()? as usize;
        let head_w = r.f32_matrix(h_in, h_out)?;
        let head_b = r.f32_matrix(1, h_out)?;
        Ok(Self { config, feat_dim, out_dim, layers, head_w, head_b })
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    #[cfg(test)]
    pub(crate) fn set_head(&mut self, w: Matrix<F>, b: Matrix<F>) {
        self.head_w = w;
        self.head_b = b;
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<'t, F: Scalar>(
    layer: &Layer<F>,
    tape: &'t Tape<F>,
    g: &Graph<F>,
    x: Var<'t, F>,
    mode: Mode,
    sampler: &mut GumbelSampler,
    beta_map: &BetaMap<F>,
    use_kernel: bool,
    param_ids: &mut Vec<usize>,
) -> Var<'t, F> {
    let binary = layer.spec.precision == Precision::Binary;
    // Register parameters in params_mut order before computing.
    let w = tape.leaf(layer.weight.clone());
    param_ids.push(w.id());
    let b = layer.bias.as_ref().map(|b| {
        let v = tape.leaf(b.clone());
        param_ids.push(v.id());
        v
    });
    let enc = layer.encoder.as_ref().map(|e| {
        let ew = tape.leaf(e.weight().clone());
        param_ids.push(ew.id());
        let eb = e.bias().map(|b| {
            let v = tape.leaf(b.clone());
            param_ids.push(v.id());
            v
        });
        (e, ew, eb)
    });

    // Binary layers consume binarized features; the encoder sees the
    // same features its layer aggregates over.
    let xin = if binary { sign_binarize(x) } else { x };

    let binary_transform = |input: Var<'t, F>| {
        let wb = sign_binarize(w);
        if use_kernel {
            bit_linear(input, wb)
        } else {
            input.matmul(wb)
        }
    };
    let add_bias = |h: Var<'t, F>| match b {
        Some(bv) => h.add_bias(bv),
        None => h,
    };
    let mut aggregated = |feats: Var<'t, F>| {
        apply_aggregation(
            layer.spec.agg,
            tape,
            g,
            xin,
            feats,
            mode,
            sampler,
            beta_map,
            enc.as_ref().map(|(e, ew, eb)| (*e, *ew, *eb)),
        )
    };

    match layer.spec.order {
        LayerOrder::TransformFirst => {
            let h = if binary {
                add_bias(binary_transform(xin))
            } else {
                add_bias(x.matmul(w))
            };
            aggregated(h).relu()
        }
        LayerOrder::AggregateFirst => {
            let a = aggregated(xin);
            let h = if binary {
                add_bias(binary_transform(sign_binarize(a)))
            } else {
                add_bias(a.matmul(w))
            };
            h.relu()
        }
    }
}

type EncoderVars<'a, 't, F> = (&'a BinaryGraphAutoEncoder<F>, Var<'t, F>, Option<Var<'t, F>>);

#[allow(clippy::too_many_arguments)]
fn apply_aggregation<'a, 't, F: Scalar>(
    agg: AggMode,
    tape: &'t Tape<F>,
    g: &Graph<F>,
    enc_feats: Var<'t, F>,
    target: Var<'t, F>,
    mode: Mode,
    sampler: &mut GumbelSampler,
    beta_map: &BetaMap<F>,
    enc: Option<EncoderVars<'a, 't, F>>,
) -> Var<'t, F> {
    match agg {
        AggMode::Fixed(kind) => aggregators::aggregate(kind, g, target),
        AggMode::MixedSum => aggregators::mixed_sum_aggregate(g, target, &MIXED_STANDARD),
        AggMode::MixedConcat => aggregators::mixed_concat_aggregate(g, target, &MIXED_STANDARD),
        AggMode::Gna => {
            let (e, ew, eb) = enc.expect("GNA layer has an encoder");
            let logits = e.encode_with(g, enc_feats, ew, eb);
            match mode {
                Mode::Train => {
                    let weights = gna_select(tape, logits, sampler, SelectMode::Train);
                    gna_aggregate(g, target, weights)
                }
                Mode::Eval => {
                    // Hard path: exactly one pool aggregator per node.
                    let onehot = gna_select(tape, logits, sampler, SelectMode::Eval).value();
                    let selection: Vec<usize> = (0..onehot.rows())
                        .map(|i| onehot.row(i).iter().position(|&v| v == F::one()).unwrap())
                        .collect();
                    tape.leaf(select_aggregate(g, &target.value(), &selection))
                }
            }
        }
        AggMode::Ana => {
            let (e, ew, eb) = enc.expect("ANA layer has an encoder");
            let raw = e.encode_with(g, enc_feats, ew, eb);
            let beta = beta_map.map(raw);
            ana_aggregate(g, target, beta)
        }
        AggMode::AnaHybrid(h) => {
            let (e, ew, eb) = enc.expect("hybrid layer has an encoder");
            let raw = e.encode_with(g, enc_feats, ew, eb);
            ana_hybrid_aggregate(tape, g, target, raw, h, beta_map)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SizeRow {
    pub name: String,
    pub bits: usize,
    pub binary: bool,
    pub encoder_bits: usize,
}

/// Serialized-size breakdown; see [`BinGnnModel::inspect`].
#[derive(Debug, Clone)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub param_count: usize,
}

impl SizeReport {
    pub fn serialized_bits(&self) -> usize {
        self.rows.iter().map(|r| r.bits).sum()
    }

    pub fn encoder_bits(&self) -> usize {
        self.rows.iter().map(|r| r.encoder_bits).sum()
    }

    pub fn kilobytes(&self) -> f64 {
        self.serialized_bits() as f64 / 8.0 / 1024.0
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>14} {:>12}\n", "component", "bits", "KB"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>14} {:>12.4}\n",
                row.name,
                row.bits,
                row.bits as f64 / 8.0 / 1024.0
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>14} {:>12.4}\n",
            "total",
            self.serialized_bits(),
            self.kilobytes()
        ));
        out.push_str(&format!("param count: {}\n", self.param_count));
        out
    }
}

/// Benchmark-scale GCN stack used by the size-accounting tests: 12
/// equal-width layers, ends full precision, middles binary.
pub fn benchmark_gcn_config() -> ModelConfig {
    let mut cfg = ModelConfig::defaults(TaskKind::GraphRegression);
    cfg.layers = 12;
    cfg.hidden_dim = 256;
    cfg.feat_dim = 256;
    cfg.out_dim = 1;
    cfg
}

// --- checkpoint byte helpers -------------------------------------------------

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32_matrix<F: Scalar>(buf: &mut Vec<u8>, m: &Matrix<F>) {
    for v in m.iter() {
        let f = v.to_f32().expect("finite value");
        buf.extend_from_slice(&f.to_le_bytes());
    }
}

fn put_opt_f32_matrix<F: Scalar>(buf: &mut Vec<u8>, m: Option<&Matrix<F>>) {
    match m {
        None => buf.push(0),
        Some(m) => {
            buf.push(1);
            put_u32(buf, m.rows() as u32);
            put_u32(buf, m.cols() as u32);
            put_f32_matrix(buf, m);
        }
    }
}

fn put_packed(buf: &mut Vec<u8>, p: &PackedBitMatrix) {
    put_u32(buf, p.rows() as u32);
    put_u32(buf, p.cols() as u32);
    for w in p.words() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.bytes.len() {
            return Err(CkptError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CkptError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_matrix<F: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<F>, CkptError> {
        let raw = self.take(rows * cols * 4)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(4) {
            let f = f32::from_le_bytes(chunk.try_into().unwrap());
            data.push(cast::<F>(f64::from(f)));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn opt_f32_matrix<F: Scalar>(&mut self) -> Result<Option<Matrix<F>>, CkptError> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let rows = self.u32()? as usize;
                let cols = self.u32()? as usize;
                Ok(Some(self.f32_matrix(rows, cols)?))
            }
            _ => Err(CkptError::Truncated),
        }
    }

    fn packed(&mut self) -> Result<PackedBitMatrix, CkptError> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n_words = rows * cols.div_ceil(64);
        let raw = self.take(n_words * 8)?;
        let words = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(PackedBitMatrix::from_words(rows, cols, words))
    }
}
