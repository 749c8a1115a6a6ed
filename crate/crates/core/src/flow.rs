//! The invertible model: a stack of masked affine coupling layers.
//!
//! Each layer keeps the coordinates selected by its mask `b` and rescales and
//! shifts the rest, conditioned on the kept part:
//!
//! ```text
//! y = b⊙x + (1−b)⊙(x⊙exp(s(b⊙x)) + t(b⊙x))
//! log|det J| = Σⱼ (1−b)ⱼ s(b⊙x)ⱼ
//! ```
//!
//! Consecutive layers use complementary masks so every coordinate is transformed.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::encoding::{Charset, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::resnet::{
    GradientBundle, NetShape, OutputKind, ResidualNet, ScaleBound, Tape, DEFAULT_BLOCKS, DEFAULT_HIDDEN,
};
use crate::rng;

pub const DEFAULT_LAYERS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// First half zeros, second half ones.
    Horizontal,
    /// Alternating runs of `m` zeros and `m` ones.
    CharRun(usize),
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Horizontal => f.write_str("horizontal"),
            MaskKind::CharRun(m) => write!(f, "char-run:{m}"),
        }
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "horizontal" {
            return Ok(MaskKind::Horizontal);
        }
        let run = s
            .strip_prefix("char-run:")
            .or_else(|| s.strip_prefix("char_run:"))
            .or_else(|| s.strip_prefix("char-run"))
            .ok_or_else(|| Error::BadMaskSpec(format!("unknown mask kind {s:?}")))?;
        let m = run.parse().map_err(|_| Error::BadMaskSpec(format!("bad run length in {s:?}")))?;
        Ok(MaskKind::CharRun(m))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Vec<bool>,
    kind: MaskKind,
}

pub fn make_mask(kind: MaskKind, dim: usize) -> Result<BinaryMask> {
    if dim < 2 {
        return Err(Error::BadMaskSpec(format!("dimension {dim} is too small for a mask")));
    }
    let bits = match kind {
        MaskKind::Horizontal => (0..dim).map(|i| i >= dim / 2).collect(),
        MaskKind::CharRun(m) => {
            if m == 0 || m >= dim {
                return Err(Error::BadMaskSpec(format!("run length {m} must be in 1..{dim}")));
            }
            (0..dim).map(|i| (i / m) % 2 == 1).collect()
        }
    };
    Ok(BinaryMask { bits, kind })
}

impl BinaryMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask { bits: self.bits.iter().map(|b| !b).collect(), kind: self.kind }
    }

    /// `0`/`1` string, the form stored in checkpoints.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str, kind: MaskKind) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::BadMaskSpec(format!("bad mask bit {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.iter().all(|&b| b) || bits.iter().all(|&b| !b) {
            return Err(Error::BadMaskSpec("mask must mix zeros and ones".into()));
        }
        Ok(BinaryMask { bits, kind })
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for row in out.as_mut_slice().chunks_exact_mut(self.bits.len()) {
            for (v, &keep) in row.iter_mut().zip(&self.bits) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        out
    }
}

/// What a coupling layer records for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    input: Matrix,
    scale: Matrix,
    s_tape: Tape,
    t_tape: Tape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    mask: BinaryMask,
    s_net: ResidualNet,
    t_net: ResidualNet,
}

impl CouplingLayer {
    pub fn new(mask: BinaryMask, s_net: ResidualNet, t_net: ResidualNet) -> Result<Self> {
        let d = mask.dim();
        if s_net.shape().dim != d || t_net.shape().dim != d {
            return Err(Error::InvalidConfig("coupling nets must match the mask width".into()));
        }
        if s_net.kind() != OutputKind::Scale || t_net.kind() != OutputKind::Translation {
            return Err(Error::InvalidConfig("coupling layer needs a scale net and a translation net".into()));
        }
        Ok(Self { mask, s_net, t_net })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn s_net(&self) -> &ResidualNet {
        &self.s_net
    }

    pub fn t_net(&self) -> &ResidualNet {
        &self.t_net
    }

    pub fn s_net_mut(&mut self) -> &mut ResidualNet {
        &mut self.s_net
    }

    pub fn t_net_mut(&mut self) -> &mut ResidualNet {
        &mut self.t_net
    }

    pub fn forward_batch_taped(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>, LayerTape)> {
        let kept = self.mask.apply(x);
        let (s, s_tape) = self.s_net.forward_batch(&kept)?;
        let (t, t_tape) = self.t_net.forward_batch(&kept)?;
        let d = self.mask.dim();
        let mut y = kept;
        let mut logdet = vec![0.0; x.rows()];
        for r in 0..x.rows() {
            let (xr, sr, tr) = (x.row(r), s.row(r), t.row(r));
            let yr = y.row_mut(r);
            for j in 0..d {
                if !self.mask.bits[j] {
                    yr[j] = xr[j] * sr[j].exp() + tr[j];
                    logdet[r] += sr[j];
                }
            }
        }
        if !y.all_finite() {
            return Err(Error::NonFiniteActivation("coupling forward"));
        }
        Ok((y, logdet, LayerTape { input: x.clone(), scale: s, s_tape, t_tape }))
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.forward_batch_taped(x).map(|(y, ld, _)| (y, ld))
    }

    pub fn inverse_batch(&self, y: &Matrix) -> Result<Matrix> {
        let kept = self.mask.apply(y);
        let s = self.s_net.eval_batch(&kept)?;
        let t = self.t_net.eval_batch(&kept)?;
        let d = self.mask.dim();
        let mut x = kept;
        for r in 0..y.rows() {
            let (yr, sr, tr) = (y.row(r), s.row(r), t.row(r));
            let xr = x.row_mut(r);
            for j in 0..d {
                if !self.mask.bits[j] {
                    xr[j] = (yr[j] - tr[j]) * (-sr[j]).exp();
                }
            }
        }
        if !x.all_finite() {
            return Err(Error::NonFiniteActivation("coupling inverse"));
        }
        Ok(x)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (y, ld) = self.forward_batch(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
        Ok((y.into_vec(), ld[0]))
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(&Matrix::from_vec(1, y.len(), y.to_vec()))?.into_vec())
    }

    /// Back-propagates `dy` (gradient w.r.t. the layer output) and `dlogdet`
    /// (gradient w.r.t. each row's log-determinant).
    ///
    /// Returns the scale-net and translation-net gradients and the gradient
    /// w.r.t. the layer input.
    pub fn backward_batch(
        &self,
        tape: &LayerTape,
        dy: &Matrix,
        dlogdet: &[f64],
    ) -> Result<(GradientBundle, GradientBundle, Matrix)> {
        let (rows, d) = (tape.input.rows(), self.mask.dim());
        if dy.rows() != rows || dy.cols() != d || dlogdet.len() != rows {
            return Err(Error::TapeMismatch("coupling upstream shape".into()));
        }
        let mut ds = Matrix::zeros(rows, d);
        let mut dt = Matrix::zeros(rows, d);
        let mut dx = Matrix::zeros(rows, d);
        for r in 0..rows {
            let (x, s, g) = (tape.input.row(r), tape.scale.row(r), dy.row(r));
            for j in 0..d {
                if self.mask.bits[j] {
                    dx.row_mut(r)[j] = g[j];
                } else {
                    let e = s[j].exp();
                    ds.row_mut(r)[j] = g[j] * x[j] * e + dlogdet[r];
                    dt.row_mut(r)[j] = g[j];
                    dx.row_mut(r)[j] = g[j] * e;
                }
            }
        }
        let (gs, dxs) = self.s_net.backward_batch(&tape.s_tape, &ds)?;
        let (gt, dxt) = self.t_net.backward_batch(&tape.t_tape, &dt)?;
        for r in 0..rows {
            let (a, b) = (dxs.row(r), dxt.row(r));
            let out = dx.row_mut(r);
            for j in 0..d {
                if self.mask.bits[j] {
                    out[j] += a[j] + b[j];
                }
            }
        }
        Ok((gs, gt, dx))
    }
}

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub mask: MaskKind,
    pub hidden: usize,
    pub blocks: usize,
    pub scale_bound: ScaleBound,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            layers: DEFAULT_LAYERS,
            mask: MaskKind::CharRun(1),
            hidden: DEFAULT_HIDDEN,
            blocks: DEFAULT_BLOCKS,
            scale_bound: ScaleBound::default(),
        }
    }
}

impl FlowConfig {
    pub fn net_shape(&self) -> NetShape {
        NetShape::new(self.dim, self.hidden, self.blocks)
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers * self.net_shape().param_count()
    }

    /// Masks for every layer: the base mask, then alternating complements.
    pub fn mask_schedule(&self) -> Result<Vec<BinaryMask>> {
        let base = make_mask(self.mask, self.dim)?;
        let flipped = base.complement();
        Ok((0..self.layers).map(|i| if i % 2 == 0 { base.clone() } else { flipped.clone() }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 coupling layers, got {}", self.layers)));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        if let ScaleBound::Tanh { max } = self.scale_bound {
            if !(max > 0.0 && max.is_finite()) {
                return Err(Error::InvalidConfig(format!("scale bound must be positive, got {max}")));
            }
        }
        Ok(())
    }
}

/// Log-density of the standard normal prior.
pub fn prior_log_density(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * sq
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    charset: Charset,
    layers: Vec<CouplingLayer>,
}

impl FlowModel {
    /// Freshly initialized model; every layer starts as the identity map.
    pub fn new(config: FlowConfig, charset: Charset, seed: u64) -> Result<Self> {
        config.validate()?;
        let shape = config.net_shape();
        let layers = config
            .mask_schedule()?
            .into_iter()
            .enumerate()
            .map(|(i, mask)| {
                let mut r = rng::stream(seed, rng::purpose::INIT + i as u64);
                let s = ResidualNet::init(shape, OutputKind::Scale, config.scale_bound, &mut r);
                let t = ResidualNet::init(shape, OutputKind::Translation, config.scale_bound, &mut r);
                CouplingLayer::new(mask, s, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, charset, layers })
    }

    pub fn from_layers(config: FlowConfig, charset: Charset, layers: Vec<CouplingLayer>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers {
            return Err(Error::InvalidConfig(format!("expected {} layers, got {}", config.layers, layers.len())));
        }
        for pair in layers.windows(2) {
            let (a, b) = (pair[0].mask.bits(), pair[1].mask.bits());
            if a.iter().zip(b).any(|(x, y)| x == y) {
                return Err(Error::InvalidConfig("consecutive coupling layers must use complementary masks".into()));
            }
        }
        if layers.iter().any(|l| l.mask.dim() != config.dim || l.s_net.shape() != config.net_shape()) {
            return Err(Error::InvalidConfig("layer shapes disagree with the configuration".into()));
        }
        Ok(Self { config, charset, layers })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn charset_digest(&self) -> String {
        self.charset.digest()
    }

    /// Fails when `cs` is not the alphabet the model was built for.
    pub fn check_charset(&self, cs: &Charset) -> Result<()> {
        let (model, runtime) = (self.charset.digest(), cs.digest());
        if model != runtime {
            return Err(Error::CharsetMismatch { model, runtime });
        }
        Ok(())
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Parameter vectors in flow order, scale net before translation net.
    pub fn param_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.s_net.params(), l.t_net.params()])
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            let CouplingLayer { s_net, t_net, .. } = l;
            [s_net.params_mut(), t_net.params_mut()]
        })
    }

    /// Adds `N(0, scale²)` noise to every parameter; used to leave the identity map in tests.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut r = rng::stream(seed, rng::purpose::PERTURB);
        for l in &mut self.layers {
            l.s_net.perturb(&mut r, scale);
            l.t_net.perturb(&mut r, scale);
        }
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let mut z = x.clone();
        let mut total = vec![0.0; x.rows()];
        for layer in &self.layers {
            let (next, ld) = layer.forward_batch(&z)?;
            z = next;
            total.iter_mut().zip(&ld).for_each(|(t, l)| *t += l);
        }
        Ok((z, total))
    }

    /// Forward pass keeping every layer's tape, for training.
    pub fn forward_batch_taped(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>, Vec<LayerTape>)> {
        let mut z = x.clone();
        let mut total = vec![0.0; x.rows()];
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, ld, tape) = layer.forward_batch_taped(&z)?;
            z = next;
            total.iter_mut().zip(&ld).for_each(|(t, l)| *t += l);
            tapes.push(tape);
        }
        Ok((z, total, tapes))
    }

    pub fn inverse_batch(&self, z: &Matrix) -> Result<Matrix> {
        let mut x = z.clone();
        for layer in self.layers.iter().rev() {
            x = layer.inverse_batch(&x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.forward_batch(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
        Ok((z.into_vec(), ld[0]))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(&Matrix::from_vec(1, z.len(), z.to_vec()))?.into_vec())
    }

    pub fn log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (z, ld) = self.forward_batch(x)?;
        Ok(z.iter_rows().zip(ld).map(|(row, l)| prior_log_density(row) + l).collect())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(&Matrix::from_vec(1, x.len(), x.to_vec()))?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config(dim: usize, layers: usize) -> FlowConfig {
        FlowConfig { dim, layers, hidden: 8, blocks: 2, ..FlowConfig::default() }
    }

    fn random_model(seed: u64, dim: usize, layers: usize, scale: f64) -> FlowModel {
        let mut m = FlowModel::new(small_config(dim, layers), Charset::default(), seed).unwrap();
        m.perturb(seed, scale);
        m
    }

    fn bits(m: &BinaryMask) -> String {
        m.to_bit_string()
    }

    #[test]
    fn mask_examples() {
        assert_eq!(bits(&make_mask(MaskKind::CharRun(2), 8).unwrap()), "00110011");
        assert_eq!(bits(&make_mask(MaskKind::Horizontal, 10).unwrap()), "0000011111");
        assert_eq!(bits(&make_mask(MaskKind::CharRun(1), 4).unwrap()), "0101");
        assert_eq!(bits(&make_mask(MaskKind::CharRun(3), 10).unwrap()), "0001110001");
        assert_eq!(bits(&make_mask(MaskKind::Horizontal, 5).unwrap()), "00111");
    }

    #[test]
    fn bad_masks() {
        assert!(matches!(make_mask(MaskKind::CharRun(0), 4), Err(Error::BadMaskSpec(_))));
        assert!(matches!(make_mask(MaskKind::CharRun(4), 4), Err(Error::BadMaskSpec(_))));
        assert!(matches!(make_mask(MaskKind::Horizontal, 1), Err(Error::BadMaskSpec(_))));
        assert!(MaskKind::from_str("diagonal").is_err());
        assert!(BinaryMask::from_bit_string("111", MaskKind::Horizontal).is_err());
    }

    #[test]
    fn mask_kind_parsing() {
        assert_eq!("char-run:2".parse::<MaskKind>().unwrap(), MaskKind::CharRun(2));
        assert_eq!("horizontal".parse::<MaskKind>().unwrap(), MaskKind::Horizontal);
        assert_eq!(MaskKind::CharRun(1).to_string(), "char-run:1");
    }

    #[test]
    fn schedule_alternates() {
        for kind in [MaskKind::CharRun(1), MaskKind::CharRun(2), MaskKind::Horizontal] {
            let cfg = FlowConfig { mask: kind, dim: 8, layers: 5, ..FlowConfig::default() };
            let masks = cfg.mask_schedule().unwrap();
            assert!(!masks[0].bits()[0], "first layer starts with a zero run");
            for pair in masks.windows(2) {
                for (a, b) in pair[0].bits().iter().zip(pair[1].bits()) {
                    assert!(!(a & b) && (a | b));
                }
            }
        }
    }

    /// Layer whose nets output constants: only the output bias is non-zero.
    fn constant_layer(mask: &str, s: &[f64], t: &[f64]) -> CouplingLayer {
        let d = mask.len();
        let shape = NetShape::new(d, 4, 1);
        let n = shape.param_count();
        let with_bias = |vals: &[f64]| {
            let mut p = vec![0.0; n];
            p[n - d..].copy_from_slice(vals);
            p
        };
        let s = ResidualNet::from_params(shape, OutputKind::Scale, ScaleBound::Unbounded, with_bias(s)).unwrap();
        let t = ResidualNet::from_params(shape, OutputKind::Translation, ScaleBound::Unbounded, with_bias(t)).unwrap();
        CouplingLayer::new(BinaryMask::from_bit_string(mask, MaskKind::Horizontal).unwrap(), s, t).unwrap()
    }

    #[test]
    fn identity_layer() {
        let layer = constant_layer("10", &[0.0, 0.0], &[0.0, 0.0]);
        let (y, ld) = layer.forward(&[0.3, -0.7]).unwrap();
        assert_eq!((y, ld), (vec![0.3, -0.7], 0.0));
        assert_eq!(layer.inverse(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn constant_coupling_example() {
        let ln2 = 2f64.ln();
        let layer = constant_layer("10", &[5.0, ln2], &[9.0, 0.3]);
        let (y, ld) = layer.forward(&[0.5, 0.25]).unwrap();
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 0.8).abs() < 1e-15);
        assert!((ld - std::f64::consts::LN_2).abs() < 1e-12);
        // 2×2 numerical Jacobian determinant.
        let h = 1e-6;
        let f = |x: [f64; 2]| layer.forward(&x).unwrap().0;
        let (a, b) = (f([0.5 + h, 0.25]), f([0.5 - h, 0.25]));
        let (c, d) = (f([0.5, 0.25 + h]), f([0.5, 0.25 - h]));
        let j = [[(a[0] - b[0]) / (2.0 * h), (c[0] - d[0]) / (2.0 * h)], [(a[1] - b[1]) / (2.0 * h), (c[1] - d[1]) / (2.0 * h)]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        assert!((det.abs().ln() - ld).abs() < 1e-8);

        let x = layer.inverse(&[0.5, 0.8]).unwrap();
        assert_eq!(x[0], 0.5);
        assert!((x[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fresh_model_is_identity() {
        let model = FlowModel::new(small_config(10, 4), Charset::default(), 3).unwrap();
        let x = [0.1, 0.5, 0.0, 0.9, 0.3, 0.2, 0.0, 0.0, 0.7, 0.4];
        let (z, ld) = model.forward(&x).unwrap();
        assert_eq!(z, x.to_vec());
        assert_eq!(ld, 0.0);
        assert_eq!(model.inverse(&x).unwrap(), x.to_vec());
        assert!((model.log_prob(&[0.0; 10]).unwrap() - (-9.189385)).abs() < 1e-6);
        assert_eq!(model.log_prob(&x).unwrap(), prior_log_density(&x));
    }

    #[test]
    fn single_layer_model_matches_layer() {
        let mut m = random_model(2, 4, 2, 0.2);
        let layer = m.layers()[0].clone();
        // Turn the second layer into the identity.
        for p in m.layers_mut()[1].s_net_mut().params_mut() {
            *p = 0.0;
        }
        for p in m.layers_mut()[1].t_net_mut().params_mut() {
            *p = 0.0;
        }
        let x = [0.2, -0.4, 0.6, 0.1];
        assert_eq!(m.forward(&x).unwrap(), layer.forward(&x).unwrap());
    }

    #[test]
    fn complement_is_enforced() {
        let m = random_model(2, 4, 2, 0.2);
        let mut layers = m.layers().to_vec();
        layers[1] = layers[0].clone();
        assert!(FlowModel::from_layers(*m.config(), Charset::default(), layers).is_err());
    }

    #[test]
    fn too_few_layers_rejected() {
        assert!(FlowModel::new(small_config(4, 1), Charset::default(), 0).is_err());
    }

    #[test]
    fn logdet_is_additive() {
        let m = random_model(7, 6, 4, 0.3);
        let x = Matrix::from_vec(1, 6, vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.9]);
        let (_, total) = m.forward_batch(&x).unwrap();
        let mut cur = x;
        let mut sum = 0.0;
        for l in m.layers() {
            let (next, ld) = l.forward_batch(&cur).unwrap();
            sum += ld[0];
            cur = next;
        }
        assert!((total[0] - sum).abs() < 1e-12);
    }

    fn numeric_log_det(m: &FlowModel, x: &[f64]) -> f64 {
        let d = x.len();
        let h = 1e-5;
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut xp = x.to_vec();
            xp[j] += h;
            let up = m.forward(&xp).unwrap().0;
            xp[j] -= 2.0 * h;
            let down = m.forward(&xp).unwrap().0;
            for i in 0..d {
                jac[i][j] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        log_abs_det(jac)
    }

    /// Gaussian elimination with partial pivoting.
    fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut acc = 0.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            let pivot = a[c][c];
            acc += pivot.abs().ln();
            for r in c + 1..n {
                let f = a[r][c] / pivot;
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        acc
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        for (seed, d) in [(1, 2), (2, 3), (3, 5), (4, 6)] {
            let m = random_model(seed, d, 4, 0.3);
            let x: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.2).collect();
            let (_, ld) = m.forward(&x).unwrap();
            assert!((ld - numeric_log_det(&m, &x)).abs() < 1e-4);
        }
    }

    #[test]
    fn density_integrates_to_one_on_toy_model() {
        // Importance sampling with a heavy-tailed Cauchy proposal: E_q[p(x)/q(x)] = 1.
        use rand_distr::{Cauchy, Distribution};
        let m = random_model(11, 2, 4, 0.05);
        let mut r = rng::stream(5, 0);
        let cauchy = Cauchy::new(0.0, 1.0).unwrap();
        let log_q1 = |x: f64| -(PI * (1.0 + x * x)).ln();
        let n = 1_000_000;
        let batch = 10_000;
        let mut total = 0.0;
        for _ in 0..n / batch {
            let mut xs = Matrix::zeros(batch, 2);
            let mut log_q = vec![0.0; batch];
            for i in 0..batch {
                let (a, b): (f64, f64) = (cauchy.sample(&mut r), cauchy.sample(&mut r));
                xs.row_mut(i).copy_from_slice(&[a, b]);
                log_q[i] = log_q1(a) + log_q1(b);
            }
            let lp = m.log_prob_batch(&xs).unwrap();
            total += lp.iter().zip(&log_q).map(|(p, q)| (p - q).exp()).sum::<f64>();
        }
        let estimate = total / n as f64;
        assert!((estimate - 1.0).abs() < 0.02, "integral = {estimate}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn coupling_round_trip(seed in 0u64..1000, x in proptest::collection::vec(-2.0f64..2.0, 5)) {
            let m = random_model(seed, 5, 2, 0.3);
            let layer = &m.layers()[0];
            let (y, _) = layer.forward(&x).unwrap();
            let back = layer.inverse(&y).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (j, &keep) in layer.mask().bits().iter().enumerate() {
                if keep {
                    prop_assert_eq!(y[j], x[j]);
                }
            }
        }

        #[test]
        fn flow_round_trip(seed in 0u64..1000, x in proptest::collection::vec(0.0f64..1.0, 10)) {
            let mut cfg = small_config(10, 18);
            cfg.hidden = 6;
            let mut m = FlowModel::new(cfg, Charset::default(), seed).unwrap();
            m.perturb(seed, 0.1);
            let (z, ld) = m.forward(&x).unwrap();
            let back = m.inverse(&z).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            let again = m.forward(&m.inverse(&x).unwrap()).unwrap().0;
            for (a, b) in again.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            // Inverse direction has the negated log-determinant at the image point.
            let (x_back, neg) = inverse_with_logdet(&m, &z);
            prop_assert!((neg + ld).abs() < 1e-8);
            prop_assert!((x_back[0] - x[0]).abs() < 1e-8);
        }
    }

    fn inverse_with_logdet(m: &FlowModel, z: &[f64]) -> (Vec<f64>, f64) {
        let mut cur = z.to_vec();
        let mut total = 0.0;
        for l in m.layers().iter().rev() {
            let prev = l.inverse(&cur).unwrap();
            total -= l.forward(&prev).unwrap().1;
            cur = prev;
        }
        (cur, total)
    }
}
