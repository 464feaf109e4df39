//! Encoder-decoder backbone with skip connections.
//!
//! Each resolution level holds `convs_per_block` units of
//! convolution → instance norm → ELU. Levels are joined by stride-2 2³
//! convolutions on the way down and stride-2 2³ transposed convolutions on the
//! way up; decoder stages concatenate the upsampled features with the encoder
//! features of the same level. A 1×1×1 convolution produces one logit per
//! voxel, activated by a sigmoid for the segmentation head or a tanh for the
//! distance-regression head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv_backward, conv_forward, down_backward, down_forward, elu, elu_grad_from_output,
    norm_backward, norm_forward, up_backward, up_forward, NormCache,
};
use super::tensor::Tensor;
use crate::error::{DtmlError, Result};
use crate::losses::LossGrad;
use crate::grid::{ProbabilityMap, Shape3, SignedDistanceMap, Volume};

/// Outputs of both heads are kept this far inside their open ranges.
pub const OUTPUT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub levels: usize,
    pub base_width: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_convs")]
    pub convs_per_block: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_convs() -> usize {
    2
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            levels: 3,
            base_width: 8,
            kernel_size: 3,
            convs_per_block: 2,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(DtmlError::InvalidDescriptor(format!(
                "need at least 2 resolution levels, got {}",
                self.levels
            )));
        }
        if self.base_width < 4 {
            return Err(DtmlError::InvalidDescriptor(format!(
                "base width must be at least 4, got {}",
                self.base_width
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(DtmlError::InvalidDescriptor(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.convs_per_block == 0 {
            return Err(DtmlError::InvalidDescriptor(
                "need at least one convolution per block".into(),
            ));
        }
        Ok(())
    }

    /// Every axis must be divisible by `2^levels`.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input(&self, shape: Shape3) -> Result<()> {
        let d = self.divisor();
        if shape.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(DtmlError::InvalidDescriptor(format!(
                "input {shape:?} is not divisible by 2^{} = {d} on every axis",
                self.levels
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Which output activation a network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Sigmoid probabilities.
    Seg,
    /// Tanh normalized signed distances.
    Dis,
}

impl Head {
    #[inline]
    pub fn activate(self, logit: f64) -> f64 {
        match self {
            Head::Seg => {
                let p = if logit >= 0.0 {
                    1.0 / (1.0 + (-logit).exp())
                } else {
                    let e = logit.exp();
                    e / (1.0 + e)
                };
                p.clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS)
            }
            Head::Dis => logit.tanh().clamp(-1.0 + OUTPUT_EPS, 1.0 - OUTPUT_EPS),
        }
    }

    /// Derivative of the activation given its output; zero where the
    /// output sits on its clamp.
    #[inline]
    pub fn derivative(self, out: f64) -> f64 {
        match self {
            Head::Seg if out <= OUTPUT_EPS || out >= 1.0 - OUTPUT_EPS => 0.0,
            Head::Seg => out * (1.0 - out),
            Head::Dis if out.abs() >= 1.0 - OUTPUT_EPS => 0.0,
            Head::Dis => 1.0 - out * out,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Seg => "seg",
            Head::Dis => "dis",
        }
    }
}

/// A named dense parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters of one network in creation order, plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub descriptor: ArchDescriptor,
    pub tensors: Vec<ParamTensor>,
}

impl NetworkParams {
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Zero-filled buffers matching every tensor.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Flat view for perturbation in gradient checks.
    pub fn scalar_mut(&mut self, mut flat: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if flat < t.data.len() {
                return &mut t.data[flat];
            }
            flat -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Copy with every value rounded through `f32`, the checkpoint precision.
    pub fn rounded_to_f32(&self) -> NetworkParams {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum UnitKind {
    Conv,
    Down,
    Up,
}

/// One operator followed by instance norm and ELU.
#[derive(Debug, Clone)]
struct Unit {
    kind: UnitKind,
    cout: usize,
    weight: usize,
    gamma: usize,
    beta: usize,
}

struct UnitCache {
    input: Tensor,
    norm: NormCache,
    output: Tensor,
}

/// Layer plan derived from a descriptor; parameter indices point into
/// [`NetworkParams::tensors`].
#[derive(Debug, Clone)]
pub struct Backbone {
    descriptor: ArchDescriptor,
    encoder: Vec<Vec<Unit>>,
    up: Vec<Unit>,
    decoder: Vec<Vec<Unit>>,
    head_weight: usize,
    head_bias: usize,
    kernel: usize,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    encoder: Vec<Vec<UnitCache>>,
    up: Vec<UnitCache>,
    decoder: Vec<Vec<UnitCache>>,
    head_input: Tensor,
}

struct PlanBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    HeNormal { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

impl PlanBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn unit(&mut self, prefix: &str, kind: UnitKind, cin: usize, cout: usize, k: usize) -> Unit {
        let (shape, fan_in) = match kind {
            UnitKind::Conv => (vec![cout, cin, k, k, k], cin * k * k * k),
            UnitKind::Down => (vec![cout, cin, 2, 2, 2], cin * 8),
            UnitKind::Up => (vec![cout, 2, 2, 2, cin], cin),
        };
        let weight = self.push(format!("{prefix}.weight"), shape, Init::HeNormal { fan_in });
        let gamma = self.push(format!("{prefix}.norm.scale"), vec![cout], Init::Const(1.0));
        let beta = self.push(format!("{prefix}.norm.shift"), vec![cout], Init::Const(0.0));
        Unit {
            kind,
            cout,
            weight,
            gamma,
            beta,
        }
    }
}

impl Backbone {
    pub fn new(descriptor: ArchDescriptor) -> Result<Self> {
        Ok(Self::plan(descriptor)?.0)
    }

    fn plan(descriptor: ArchDescriptor) -> Result<(Self, PlanBuilder)> {
        descriptor.validate()?;
        let k = descriptor.kernel_size;
        let levels = descriptor.levels;
        let mut b = PlanBuilder { specs: Vec::new() };
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let w = descriptor.width(l);
            let mut units = Vec::new();
            let mut cin = if l == 0 { 1 } else { descriptor.width(l - 1) };
            if l > 0 {
                units.push(b.unit(&format!("enc{l}.down"), UnitKind::Down, cin, w, k));
                cin = w;
            }
            for j in 0..descriptor.convs_per_block {
                units.push(b.unit(&format!("enc{l}.conv{j}"), UnitKind::Conv, cin, w, k));
                cin = w;
            }
            encoder.push(units);
        }
        let mut up = Vec::with_capacity(levels - 1);
        let mut decoder = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            let w = descriptor.width(l);
            up.push(b.unit(
                &format!("dec{l}.up"),
                UnitKind::Up,
                descriptor.width(l + 1),
                w,
                k,
            ));
            let mut units = Vec::new();
            let mut cin = 2 * w;
            for j in 0..descriptor.convs_per_block {
                units.push(b.unit(&format!("dec{l}.conv{j}"), UnitKind::Conv, cin, w, k));
                cin = w;
            }
            decoder.push(units);
        }
        let w0 = descriptor.width(0);
        let head_weight = b.push(
            "head.weight".into(),
            vec![1, w0, 1, 1, 1],
            Init::Normal {
                std: (1.0 / w0 as f64).sqrt(),
            },
        );
        let head_bias = b.push("head.bias".into(), vec![1], Init::Const(0.0));
        Ok((
            Self {
                descriptor,
                encoder,
                up,
                decoder,
                head_weight,
                head_bias,
                kernel: k,
            },
            b,
        ))
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    fn unit_forward(&self, unit: &Unit, params: &NetworkParams, input: Tensor) -> UnitCache {
        let w = &params.tensors[unit.weight].data;
        let pre = match unit.kind {
            UnitKind::Conv => conv_forward(&input, w, unit.cout, self.kernel),
            UnitKind::Down => down_forward(&input, w, unit.cout),
            UnitKind::Up => up_forward(&input, w, unit.cout),
        };
        let (mut output, norm) = norm_forward(
            &pre,
            &params.tensors[unit.gamma].data,
            &params.tensors[unit.beta].data,
        );
        output.data.iter_mut().for_each(|v| *v = elu(*v));
        UnitCache {
            input,
            norm,
            output,
        }
    }

    fn unit_backward(
        &self,
        unit: &Unit,
        params: &NetworkParams,
        cache: &UnitCache,
        mut dout: Tensor,
        grads: &mut [Vec<f64>],
        need_input: bool,
    ) -> Option<Tensor> {
        dout.data
            .iter_mut()
            .zip(&cache.output.data)
            .for_each(|(d, &y)| *d *= elu_grad_from_output(y));
        let (dgamma, dbeta) = pair_mut(grads, unit.gamma, unit.beta);
        let dpre = norm_backward(
            &cache.norm,
            &params.tensors[unit.gamma].data,
            &dout,
            dgamma,
            dbeta,
        );
        let w = &params.tensors[unit.weight].data;
        let dw = &mut grads[unit.weight];
        match unit.kind {
            UnitKind::Conv => {
                conv_backward(&cache.input, w, &dpre, self.kernel, dw, need_input)
            }
            UnitKind::Down => Some(down_backward(&cache.input, w, &dpre, dw)),
            UnitKind::Up => up_backward(&cache.input, w, &dpre, dw, need_input),
        }
    }

    fn stage_forward(
        &self,
        units: &[Unit],
        params: &NetworkParams,
        mut x: Tensor,
    ) -> (Tensor, Vec<UnitCache>) {
        let mut caches = Vec::with_capacity(units.len());
        for u in units {
            let c = self.unit_forward(u, params, x);
            x = c.output.clone();
            caches.push(c);
        }
        (x, caches)
    }

    fn stage_backward(
        &self,
        units: &[Unit],
        params: &NetworkParams,
        caches: &[UnitCache],
        mut d: Tensor,
        grads: &mut [Vec<f64>],
        need_input: bool,
    ) -> Option<Tensor> {
        for (i, (u, c)) in units.iter().zip(caches).enumerate().rev() {
            let need = need_input || i > 0;
            match self.unit_backward(u, params, c, d, grads, need) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }

    /// Raw per-voxel logits for a single-channel input.
    pub fn forward(&self, params: &NetworkParams, input: Tensor) -> (Tensor, ForwardCache) {
        let levels = self.descriptor.levels;
        let mut enc_caches = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut x = input;
        for units in &self.encoder {
            let (out, caches) = self.stage_forward(units, params, x);
            enc_caches.push(caches);
            skips.push(out.clone());
            x = out;
        }
        let mut h = skips.pop().expect("at least one level");
        let mut up_caches: Vec<Option<UnitCache>> = (0..levels - 1).map(|_| None).collect();
        let mut dec_caches: Vec<Vec<UnitCache>> = (0..levels - 1).map(|_| Vec::new()).collect();
        for l in (0..levels - 1).rev() {
            let uc = self.unit_forward(&self.up[l], params, h);
            let cat = Tensor::concat(&uc.output, &skips[l]);
            up_caches[l] = Some(uc);
            let (out, caches) = self.stage_forward(&self.decoder[l], params, cat);
            dec_caches[l] = caches;
            h = out;
        }
        let logits = self.head_forward(params, &h);
        (
            logits,
            ForwardCache {
                encoder: enc_caches,
                up: up_caches.into_iter().map(|c| c.expect("filled")).collect(),
                decoder: dec_caches,
                head_input: h,
            },
        )
    }

    fn head_forward(&self, params: &NetworkParams, h: &Tensor) -> Tensor {
        let mut out = conv_forward(h, &params.tensors[self.head_weight].data, 1, 1);
        let b = params.tensors[self.head_bias].data[0];
        out.data.iter_mut().for_each(|v| *v += b);
        out
    }

    /// Accumulates parameter gradients of a scalar loss given its gradient
    /// with respect to the logits.
    pub fn backward(
        &self,
        params: &NetworkParams,
        cache: &ForwardCache,
        dlogits: &Tensor,
        grads: &mut [Vec<f64>],
    ) {
        let levels = self.descriptor.levels;
        grads[self.head_bias][0] += dlogits.data.iter().sum::<f64>();
        let mut d = conv_backward(
            &cache.head_input,
            &params.tensors[self.head_weight].data,
            dlogits,
            1,
            &mut grads[self.head_weight],
            true,
        )
        .expect("input gradient requested");
        let mut dskips: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let dcat = self
                .stage_backward(&self.decoder[l], params, &cache.decoder[l], d, grads, true)
                .expect("input gradient requested");
            let (dup, dskip) = dcat.split(self.descriptor.width(l));
            dskips[l] = Some(dskip);
            d = self
                .unit_backward(&self.up[l], params, &cache.up[l], dup, grads, true)
                .expect("input gradient requested");
        }
        for l in (0..levels).rev() {
            if let Some(s) = dskips[l].take() {
                d.add_assign(&s);
            }
            match self.stage_backward(&self.encoder[l], params, &cache.encoder[l], d, grads, l > 0)
            {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

fn pair_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Value of a loss on the activated outputs of one crop, and the gradient of
/// that value with respect to every parameter. `loss` receives the activated
/// outputs and returns the value with its gradient in those outputs.
pub fn value_and_grad<F>(
    backbone: &Backbone,
    params: &NetworkParams,
    x: &Volume,
    head: Head,
    loss: F,
) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&[f64]) -> Result<LossGrad>,
{
    let mut grads = params.zeros_like();
    let value = accumulate_grad(backbone, params, x, head, 1.0, loss, &mut grads)?;
    Ok((value, grads))
}

/// Like [`value_and_grad`] but adds `scale ×` the gradient into `grads`.
pub(crate) fn accumulate_grad<F>(
    backbone: &Backbone,
    params: &NetworkParams,
    x: &Volume,
    head: Head,
    scale: f64,
    loss: F,
    grads: &mut [Vec<f64>],
) -> Result<f64>
where
    F: FnOnce(&[f64]) -> Result<LossGrad>,
{
    check_shape(params, x.shape())?;
    let (logits, cache) =
        backbone.forward(params, Tensor::from_channel(x.shape(), x.data().to_vec()));
    let out: Vec<f64> = logits.data.iter().map(|&v| head.activate(v)).collect();
    let LossGrad { value, grad } = loss(&out)?;
    let dlogits = Tensor::from_channel(
        x.shape(),
        grad.iter()
            .zip(&out)
            .map(|(g, &o)| scale * g * head.derivative(o))
            .collect(),
    );
    backbone.backward(params, &cache, &dlogits, grads);
    Ok(value)
}

fn check_shape(params: &NetworkParams, shape: Shape3) -> Result<()> {
    if params.descriptor.check_input(shape).is_err() {
        let d = params.descriptor.divisor();
        return Err(DtmlError::ShapeMismatch {
            expected: shape.map(|n| (n / d).max(1) * d),
            actual: shape,
        });
    }
    Ok(())
}

/// Builds a backbone's parameters with fan-in variance scaling from `seed`.
pub fn build_backbone(descriptor: ArchDescriptor, seed: u64) -> Result<NetworkParams> {
    let (_, builder) = Backbone::plan(descriptor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = builder
        .specs
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::HeNormal { fan_in } => {
                    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
                Init::Normal { std } => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
                Init::Const(c) => vec![c; n],
            };
            ParamTensor { name, shape, data }
        })
        .collect();
    Ok(NetworkParams {
        descriptor,
        tensors,
    })
}

/// Runs a network on a volume crop and applies the head activation.
pub fn forward_head(params: &NetworkParams, x: &Volume, head: Head) -> Result<Vec<f64>> {
    let backbone = Backbone::new(params.descriptor)?;
    forward_with(&backbone, params, x, head)
}

pub(crate) fn forward_with(
    backbone: &Backbone,
    params: &NetworkParams,
    x: &Volume,
    head: Head,
) -> Result<Vec<f64>> {
    let shape = x.shape();
    check_shape(params, shape)?;
    let (logits, _) = backbone.forward(params, Tensor::from_channel(shape, x.data().to_vec()));
    Ok(logits.data.into_iter().map(|v| head.activate(v)).collect())
}

/// Segmentation network output: sigmoid probabilities.
pub fn forward_seg(params: &NetworkParams, x: &Volume) -> Result<ProbabilityMap> {
    let data = forward_head(params, x, Head::Seg)?;
    ProbabilityMap::new(*x.geometry(), data)
}

/// Regression network output: tanh-bounded normalized signed distances.
pub fn forward_dis(params: &NetworkParams, x: &Volume) -> Result<SignedDistanceMap> {
    let data = forward_head(params, x, Head::Dis)?;
    SignedDistanceMap::new(*x.geometry(), data, true)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor {
            levels: 2,
            base_width: 4,
            kernel_size: 3,
            convs_per_block: 1,
        }
    }

    fn input(shape: Shape3, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        let n = shape.iter().product();
        Volume::new(
            Geometry::isotropic(shape).unwrap(),
            (0..n).map(|_| d.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn descriptor_validation() {
        assert!(tiny().validate().is_ok());
        let mut d = tiny();
        d.levels = 1;
        assert!(matches!(d.validate(), Err(DtmlError::InvalidDescriptor(_))));
        let mut d = tiny();
        d.base_width = 3;
        assert!(d.validate().is_err());
        let mut d = tiny();
        d.kernel_size = 2;
        assert!(d.validate().is_err());
    }

    #[test]
    fn input_divisibility() {
        let d = ArchDescriptor {
            levels: 3,
            ..tiny()
        };
        assert!(d.check_input([16, 16, 16]).is_ok());
        assert!(d.check_input([24, 24, 24]).is_ok());
        assert!(matches!(
            d.check_input([20, 20, 20]),
            Err(DtmlError::InvalidDescriptor(_))
        ));
    }

    #[test]
    fn shape_preserved() {
        let p = build_backbone(tiny(), 1).unwrap();
        let x = input([8, 8, 16], 2);
        let y = forward_seg(&p, &x).unwrap();
        assert_eq!(y.shape(), [8, 8, 16]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let z = forward_dis(&p, &x).unwrap();
        assert!(z.is_normalized());
        assert!(z.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn non_divisible_input_is_shape_mismatch() {
        let p = build_backbone(tiny(), 1).unwrap();
        let x = input([6, 8, 8], 2);
        assert!(matches!(
            forward_seg(&p, &x),
            Err(DtmlError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = build_backbone(tiny(), 5).unwrap();
        let b = build_backbone(tiny(), 5).unwrap();
        let c = build_backbone(tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let x = input([8, 8, 8], 3);
        assert_eq!(
            forward_seg(&a, &x).unwrap().data(),
            forward_seg(&b, &x).unwrap().data()
        );
    }

    #[test]
    fn parameter_names_unique() {
        let p = build_backbone(ArchDescriptor::default(), 0).unwrap();
        let mut names: Vec<_> = p.tensors.iter().map(|t| t.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn head_activations_stay_open() {
        assert!(Head::Seg.activate(1e3) < 1.0);
        assert!(Head::Seg.activate(-1e3) > 0.0);
        assert!(Head::Dis.activate(1e3) < 1.0);
        assert!(Head::Dis.activate(-1e3) > -1.0);
        assert_eq!(Head::Seg.activate(0.0), 0.5);
    }
}
