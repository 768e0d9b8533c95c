//! Heterogeneous local models, the shared homogeneous extractor and the
//! dimension-wise feature mixture that couples them.
//!
//! A local model is split into an extractor producing a `d`-wide
//! representation and a single linear header `d → C`. The shared extractor
//! also ends in width `d`, so the two representations can be blended per
//! coordinate:
//!
//! ```text
//! R = R_g · (1 − α) + R_f · α
//! logits = header(R)
//! ```

use crate::autodiff::{Activation, DenseLayer, LayerCache, LayeredModel, Parameter, Parameterized, Tape};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

pub const ZOO_SIZE: usize = 5;

/// Representation width the reference widths below are expressed against.
pub const REFERENCE_REP_DIM: usize = 500;

/// Hidden widths per variant at reference scale; the representation layer of
/// width `d` follows. Variant 1 is the narrow-but-deeper one.
const ZOO_HIDDEN: [&[usize]; ZOO_SIZE] = [&[2000], &[1500, 500], &[1000], &[800], &[500]];

/// Hidden width of the shared extractor at reference scale.
const HOMO_HIDDEN: usize = 250;

fn scale_width(width: usize, rep_dim: usize) -> usize {
    let scaled = (width as f64 * rep_dim as f64 / REFERENCE_REP_DIM as f64).round() as usize;
    scaled.max(1)
}

/// Layer widths `[input_dim, hidden…, d]` of a zoo extractor.
pub fn zoo_extractor_dims(variant: usize, input_dim: usize, rep_dim: usize) -> Result<Vec<usize>> {
    let hidden = ZOO_HIDDEN
        .get(variant)
        .ok_or_else(|| Error::invalid(format!("zoo variant must be in [0, {ZOO_SIZE}), got {variant}")))?;
    let mut dims = vec![input_dim];
    dims.extend(hidden.iter().map(|&w| scale_width(w, rep_dim)));
    dims.push(rep_dim);
    Ok(dims)
}

fn homo_extractor_dims(input_dim: usize, rep_dim: usize) -> Vec<usize> {
    vec![input_dim, scale_width(HOMO_HIDDEN, rep_dim), rep_dim]
}

/// Extractor + header model owned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    variant: usize,
    extractor: LayeredModel,
    header: DenseLayer,
}

impl SplitModel {
    pub fn new(variant: usize, extractor: LayeredModel, header: DenseLayer) -> Result<Self> {
        let rep_dim = extractor
            .out_dim()
            .ok_or_else(|| Error::invalid("extractor must have at least one layer"))?;
        if header.in_dim() != rep_dim {
            return Err(Error::ShapeMismatch {
                op: "SplitModel::new",
                expected: vec![rep_dim],
                actual: vec![header.in_dim()],
            });
        }
        if header.activation() != Activation::Identity {
            return Err(Error::invalid("header must emit raw logits"));
        }
        Ok(Self {
            variant,
            extractor,
            header,
        })
    }

    pub fn variant(&self) -> usize {
        self.variant
    }

    pub fn extractor(&self) -> &LayeredModel {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut LayeredModel {
        &mut self.extractor
    }

    pub fn header(&self) -> &DenseLayer {
        &self.header
    }

    pub fn header_mut(&mut self) -> &mut DenseLayer {
        &mut self.header
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.in_dim().unwrap_or(0)
    }

    pub fn rep_dim(&self) -> usize {
        self.header.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.header.out_dim()
    }

    /// Logits of the local model alone, `header(extractor(x))`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LocalTape)> {
        let (rep, extractor_tape) = self.extractor.forward(x)?;
        let (logits, header_cache) = self.header.forward(&rep)?;
        Ok((
            logits,
            LocalTape {
                extractor: extractor_tape,
                header: header_cache,
            },
        ))
    }

    pub fn backward(&mut self, tape: &LocalTape, grad_logits: &Tensor) -> Result<()> {
        let grad_rep = self.header.backward(&tape.header, grad_logits)?;
        if !self.extractor.is_fully_frozen() {
            self.extractor.backward(&tape.extractor, &grad_rep)?;
        }
        Ok(())
    }
}

impl Parameterized for SplitModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.extractor.parameters();
        p.extend(self.header.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.extractor.parameters_mut();
        p.extend(self.header.parameters_mut());
        p
    }
}

#[derive(Debug, Clone)]
pub struct LocalTape {
    extractor: Tape,
    header: LayerCache,
}

/// The globally shared small extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct HomoExtractor {
    layers: LayeredModel,
}

impl HomoExtractor {
    pub fn new(layers: LayeredModel) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("homogeneous extractor needs at least one layer"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &LayeredModel {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut LayeredModel {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.in_dim().unwrap_or(0)
    }

    pub fn rep_dim(&self) -> usize {
        self.layers.out_dim().unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.layers.forward(x)
    }

    /// Checks the dimension-matching rule against a local model.
    pub fn check_compatible(&self, model: &SplitModel) -> Result<()> {
        if self.rep_dim() != model.rep_dim() || self.input_dim() != model.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "HomoExtractor::check_compatible",
                expected: vec![model.input_dim(), model.rep_dim()],
                actual: vec![self.input_dim(), self.rep_dim()],
            });
        }
        Ok(())
    }
}

impl Parameterized for HomoExtractor {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.parameters_mut()
    }
}

/// Per-client trainable mixing weights over the `d` representation
/// coordinates. Starts at all ones, i.e. the pure local model.
#[derive(Debug, Clone, PartialEq)]
pub struct MixVector {
    alpha: Parameter,
    lr: f64,
}

impl MixVector {
    pub fn new(rep_dim: usize, lr: f64) -> Result<Self> {
        if rep_dim == 0 {
            return Err(Error::invalid("mix vector width must be positive"));
        }
        Self::from_values(Tensor::ones(&[rep_dim]), lr)
    }

    pub fn from_values(alpha: Tensor, lr: f64) -> Result<Self> {
        if alpha.shape().len() != 1 {
            return Err(Error::invalid("mix vector must be one-dimensional"));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("mix vector learning rate must be ≥ 0, got {lr}")));
        }
        alpha.ensure_finite("mix vector")?;
        Ok(Self {
            alpha: Parameter::new(alpha),
            lr,
        })
    }

    pub fn values(&self) -> &Tensor {
        self.alpha.value()
    }

    pub fn param(&self) -> &Parameter {
        &self.alpha
    }

    pub fn param_mut(&mut self) -> &mut Parameter {
        &mut self.alpha
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn dim(&self) -> usize {
        self.alpha.numel()
    }

    pub fn mean(&self) -> f64 {
        self.alpha.value().mean()
    }
}

impl Parameterized for MixVector {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.alpha]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.alpha]
    }
}

/// Deterministic zoo member: extractor of the variant's widths (relu
/// throughout) and a linear header `d → num_classes`.
pub fn build_zoo_model(
    variant: usize,
    input_dim: usize,
    rep_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SplitModel> {
    if input_dim == 0 || rep_dim == 0 || num_classes < 2 {
        return Err(Error::invalid(format!(
            "zoo model needs positive dims and ≥ 2 classes, got input {input_dim}, d {rep_dim}, C {num_classes}"
        )));
    }
    let dims = zoo_extractor_dims(variant, input_dim, rep_dim)?;
    let mut rng = rng_from_seed(seed);
    let extractor = LayeredModel::init(&dims, Activation::Relu, &mut rng)?;
    let header = DenseLayer::init(rep_dim, num_classes, Activation::Identity, &mut rng)?;
    SplitModel::new(variant, extractor, header)
}

/// Shared extractor, strictly smaller than every zoo extractor of the same
/// `(input_dim, d)`.
pub fn build_homo_extractor(input_dim: usize, rep_dim: usize, seed: u64) -> Result<HomoExtractor> {
    if input_dim == 0 || rep_dim == 0 {
        return Err(Error::invalid("homogeneous extractor needs positive dims"));
    }
    let dims = homo_extractor_dims(input_dim, rep_dim);
    let own = dense_param_count(&dims);
    let smallest_zoo = (0..ZOO_SIZE)
        .map(|v| zoo_extractor_dims(v, input_dim, rep_dim).map(|d| dense_param_count(&d)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);
    if own >= smallest_zoo {
        return Err(Error::invalid(format!(
            "d = {rep_dim} too small: shared extractor ({own} params) must be smaller than every zoo extractor ({smallest_zoo})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    HomoExtractor::new(LayeredModel::init(&dims, Activation::Relu, &mut rng)?)
}

/// Parameter count of a dense stack with biases from its layer widths.
pub fn dense_param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub fn param_count<M: Parameterized + ?Sized>(model: &M) -> usize {
    model.param_count()
}

fn check_mix_shapes(rg: &Tensor, rf: &Tensor, alpha: &Tensor) -> Result<()> {
    rf.ensure_shape("mix_features", rg.shape())?;
    if rg.shape().len() != 2 {
        return Err(Error::invalid("representations must be [batch × d] matrices"));
    }
    alpha.ensure_shape("mix_features", &[rg.cols()])
}

/// `out[b, j] = rg[b, j]·(1 − α[j]) + rf[b, j]·α[j]`.
pub fn mix_features(rg: &Tensor, rf: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    check_mix_shapes(rg, rf, alpha)?;
    let d = rg.cols();
    let a = alpha.data();
    let out: Vec<f64> = rg
        .data()
        .iter()
        .zip(rf.data())
        .enumerate()
        .map(|(i, (&g, &f))| {
            let aj = a[i % d];
            g * (1.0 - aj) + f * aj
        })
        .collect();
    let out = Tensor::new(rg.shape().to_vec(), out)?;
    out.ensure_finite("mixed representation")?;
    Ok(out)
}

/// Gradients of [`mix_features`] with respect to `(rg, rf, α)`.
pub fn mix_features_backward(
    grad_out: &Tensor,
    rg: &Tensor,
    rf: &Tensor,
    alpha: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_mix_shapes(rg, rf, alpha)?;
    grad_out.ensure_shape("mix_features_backward", rg.shape())?;
    let (batch, d) = (rg.rows(), rg.cols());
    let a = alpha.data();
    let (g, gf, gr) = (grad_out.data(), rf.data(), rg.data());
    let mut d_rg = vec![0.0; batch * d];
    let mut d_rf = vec![0.0; batch * d];
    let mut d_alpha = vec![0.0; d];
    for b in 0..batch {
        for j in 0..d {
            let i = b * d + j;
            d_rg[i] = g[i] * (1.0 - a[j]);
            d_rf[i] = g[i] * a[j];
            d_alpha[j] += g[i] * (gf[i] - gr[i]);
        }
    }
    Ok((
        Tensor::new(vec![batch, d], d_rg)?,
        Tensor::new(vec![batch, d], d_rf)?,
        Tensor::new(vec![d], d_alpha)?,
    ))
}

/// Intermediates of [`mixed_forward`].
#[derive(Debug, Clone)]
pub struct MixedTape {
    homo: Tape,
    global_rep: Tensor,
    local: Tape,
    local_rep: Tensor,
    header: LayerCache,
}

impl MixedTape {
    pub fn global_rep(&self) -> &Tensor {
        &self.global_rep
    }

    pub fn local_rep(&self) -> &Tensor {
        &self.local_rep
    }

    pub fn homo_tape(&self) -> &Tape {
        &self.homo
    }

    pub fn local_tape(&self) -> &Tape {
        &self.local
    }
}

/// `header(mix(homo(x), extractor(x), α))`.
pub fn mixed_forward(
    x: &Tensor,
    homo: &HomoExtractor,
    model: &SplitModel,
    alpha: &MixVector,
) -> Result<(Tensor, MixedTape)> {
    homo.check_compatible(model)?;
    let (global_rep, homo_tape) = homo.forward(x)?;
    let (local_rep, local_tape) = model.extractor.forward(x)?;
    let mixed = mix_features(&global_rep, &local_rep, alpha.values())?;
    let (logits, header) = model.header.forward(&mixed)?;
    Ok((
        logits,
        MixedTape {
            homo: homo_tape,
            global_rep,
            local: local_tape,
            local_rep,
            header,
        },
    ))
}

/// Reverse pass of [`mixed_forward`]; gradients land in whichever of the
/// three components are not frozen.
pub fn mixed_backward(
    homo: &mut HomoExtractor,
    model: &mut SplitModel,
    alpha: &mut MixVector,
    tape: &MixedTape,
    grad_logits: &Tensor,
) -> Result<()> {
    let grad_mixed = model.header.backward(&tape.header, grad_logits)?;
    let (d_rg, d_rf, d_alpha) =
        mix_features_backward(&grad_mixed, &tape.global_rep, &tape.local_rep, alpha.values())?;
    alpha.alpha.accumulate(d_alpha.data());
    if !model.extractor.is_fully_frozen() {
        model.extractor.backward(&tape.local, &d_rf)?;
    }
    if !homo.is_fully_frozen() {
        homo.layers.backward(&tape.homo, &d_rg)?;
    }
    Ok(())
}

/// Small-model path: `header(homo(x))`, no mixing.
pub fn small_forward(x: &Tensor, homo: &HomoExtractor, model: &SplitModel) -> Result<(Tensor, SmallTape)> {
    homo.check_compatible(model)?;
    let (rep, homo_tape) = homo.forward(x)?;
    let (logits, header) = model.header.forward(&rep)?;
    Ok((logits, SmallTape { homo: homo_tape, header }))
}

pub fn small_backward(
    homo: &mut HomoExtractor,
    model: &mut SplitModel,
    tape: &SmallTape,
    grad_logits: &Tensor,
) -> Result<()> {
    let grad_rep = model.header.backward(&tape.header, grad_logits)?;
    if !homo.is_fully_frozen() {
        homo.layers.backward(&tape.homo, &grad_rep)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SmallTape {
    homo: Tape,
    header: LayerCache,
}

/// A client's complete mixed model: shared extractor copy, local model and
/// mix vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedModel {
    pub homo: HomoExtractor,
    pub local: SplitModel,
    pub alpha: MixVector,
}

impl MixedModel {
    pub fn new(homo: HomoExtractor, local: SplitModel, alpha: MixVector) -> Result<Self> {
        homo.check_compatible(&local)?;
        if alpha.dim() != local.rep_dim() {
            return Err(Error::ShapeMismatch {
                op: "MixedModel::new",
                expected: vec![local.rep_dim()],
                actual: vec![alpha.dim()],
            });
        }
        Ok(Self { homo, local, alpha })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MixedTape)> {
        mixed_forward(x, &self.homo, &self.local, &self.alpha)
    }

    pub fn backward(&mut self, tape: &MixedTape, grad_logits: &Tensor) -> Result<()> {
        mixed_backward(&mut self.homo, &mut self.local, &mut self.alpha, tape, grad_logits)
    }
}

impl Parameterized for MixedModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.homo.parameters();
        p.extend(self.local.parameters());
        p.extend(self.alpha.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.homo.parameters_mut();
        p.extend(self.local.parameters_mut());
        p.extend(self.alpha.parameters_mut());
        p
    }
}
