//! The feature extractor `g` (four complex 3x3 convolutions, each followed
//! by a smoothed ReLU), the single-layer adapter `h`, and their composition
//! `q = h(g(x))`.
//!
//! Complex channels are carried as real planes, `re_0..re_{C-1}` followed
//! by `im_0..im_{C-1}`. Every convolution is a real `[2C][2C][3][3]` block,
//! i.e. four real kernels per complex in/out channel pair; the complex
//! product `(a+ib)(c+id)` is the special case set by
//! [`ConvLayer::set_complex_tap`]. The one-channel input image is lifted to
//! `C` channels by replication before the first layer.

pub mod activation;
pub mod conv;
pub mod model_file;
pub mod params;

pub use activation::{smoothed_relu, SmoothedRelu, DEFAULT_DELTA};
pub use conv::ConvGeom;
pub use params::{ParamBundle, Tensor};

use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, standard_normal, ComplexImage, FeatureStack};
use conv::TAPS;

/// Complex channels of every feature map.
pub const CHANNELS: usize = 16;
/// Real planes of every feature map.
pub const REAL_CHANNELS: usize = 2 * CHANNELS;
pub const EXTRACTOR_LAYERS: usize = 4;
pub const KERNEL_SHAPE: [usize; 4] = [REAL_CHANNELS, REAL_CHANNELS, 3, 3];
/// Real scalars in one layer.
pub const LAYER_PARAMS: usize = REAL_CHANNELS * REAL_CHANNELS * TAPS;

pub fn extractor_tensor_name(layer: usize) -> String {
    format!("extractor.conv{layer}")
}

pub const ADAPTER_TENSOR: &str = "adapter.conv";

/// One 16-to-16 complex convolution layer without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    weights: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros() -> Self {
        ConvLayer {
            weights: vec![0.0; LAYER_PARAMS],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != LAYER_PARAMS {
            return Err(Error::Shape(format!(
                "conv layer needs {LAYER_PARAMS} weights, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("conv layer weights".into()));
        }
        Ok(ConvLayer { weights })
    }

    /// Center tap `1 + 0i` on matched channels.
    pub fn identity() -> Self {
        let mut layer = Self::zeros();
        for c in 0..CHANNELS {
            layer.set_complex_tap(c, c, 4, Complex64::new(1.0, 0.0));
        }
        layer
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn index(out_plane: usize, in_plane: usize, tap: usize) -> usize {
        (out_plane * REAL_CHANNELS + in_plane) * TAPS + tap
    }

    /// Makes the `(input, output)` channel pair at `tap` multiply by `w`.
    pub fn set_complex_tap(&mut self, out_ch: usize, in_ch: usize, tap: usize, w: Complex64) {
        let (or, oi) = (out_ch, CHANNELS + out_ch);
        let (ir, ii) = (in_ch, CHANNELS + in_ch);
        self.weights[Self::index(or, ir, tap)] = w.re;
        self.weights[Self::index(or, ii, tap)] = -w.im;
        self.weights[Self::index(oi, ir, tap)] = w.im;
        self.weights[Self::index(oi, ii, tap)] = w.re;
    }

    pub fn apply(&self, height: usize, width: usize, planes: &[f64]) -> Vec<f64> {
        conv::conv_forward(&geom(height, width), planes, &self.weights)
    }

    pub fn apply_adjoint(&self, height: usize, width: usize, planes: &[f64]) -> Vec<f64> {
        conv::conv_input_adjoint(&geom(height, width), planes, &self.weights)
    }
}

pub fn geom(height: usize, width: usize) -> ConvGeom {
    ConvGeom {
        height,
        width,
        cin: REAL_CHANNELS,
        cout: REAL_CHANNELS,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// i.i.d. normal, standard deviation `sqrt(1 / (9 * fan_in))` with
    /// `fan_in` the 32 real input planes.
    GlorotLike,
    Identity,
    Zero,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glorot-like" | "glorot" => Ok(InitScheme::GlorotLike),
            "identity" => Ok(InitScheme::Identity),
            "zero" => Ok(InitScheme::Zero),
            other => Err(Error::InvalidArgument(format!(
                "unknown init scheme '{other}'"
            ))),
        }
    }
}

pub fn glorot_std() -> f64 {
    (1.0 / (TAPS * REAL_CHANNELS) as f64).sqrt()
}

fn init_layer(scheme: InitScheme, rng: &mut crate::tensor::SeededRng) -> ConvLayer {
    match scheme {
        InitScheme::GlorotLike => {
            let std = glorot_std();
            ConvLayer {
                weights: (0..LAYER_PARAMS)
                    .map(|_| std * standard_normal(rng))
                    .collect(),
            }
        }
        InitScheme::Identity => ConvLayer::identity(),
        InitScheme::Zero => ConvLayer::zeros(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    layers: Vec<ConvLayer>,
}

impl ExtractorParams {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.len() != EXTRACTOR_LAYERS {
            return Err(Error::Shape(format!(
                "extractor needs {EXTRACTOR_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        Ok(ExtractorParams { layers })
    }

    pub fn init(seed: u64, scheme: InitScheme) -> Self {
        let mut rng = seeded_rng(seed);
        ExtractorParams {
            layers: (0..EXTRACTOR_LAYERS)
                .map(|_| init_layer(scheme, &mut rng))
                .collect(),
        }
    }

    pub fn zeros() -> Self {
        Self::init(0, InitScheme::Zero)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn to_bundle(&self) -> ParamBundle {
        let mut b = ParamBundle::new();
        for (i, l) in self.layers.iter().enumerate() {
            b.insert(
                extractor_tensor_name(i),
                Tensor::new(KERNEL_SHAPE.to_vec(), l.weights.clone()).unwrap(),
            );
        }
        b
    }

    pub fn from_bundle(b: &ParamBundle) -> Result<Self> {
        let layers = (0..EXTRACTOR_LAYERS)
            .map(|i| {
                let t = b.require(&extractor_tensor_name(i))?;
                ConvLayer::from_weights(t.data.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Coordinate-wise mean of several extractors.
    pub fn average(list: &[ExtractorParams]) -> Result<Self> {
        let bundles: Vec<_> = list.iter().map(Self::to_bundle).collect();
        Self::from_bundle(&ParamBundle::average(&bundles)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    layer: ConvLayer,
}

impl AdapterParams {
    pub fn new(layer: ConvLayer) -> Self {
        AdapterParams { layer }
    }

    pub fn init(seed: u64, scheme: InitScheme) -> Self {
        let mut rng = seeded_rng(seed);
        AdapterParams {
            layer: init_layer(scheme, &mut rng),
        }
    }

    pub fn identity() -> Self {
        AdapterParams {
            layer: ConvLayer::identity(),
        }
    }

    pub fn zeros() -> Self {
        AdapterParams {
            layer: ConvLayer::zeros(),
        }
    }

    pub fn layer(&self) -> &ConvLayer {
        &self.layer
    }

    pub fn param_count(&self) -> usize {
        self.layer.weights.len()
    }

    pub fn is_zero(&self) -> bool {
        self.layer.weights.iter().all(|&w| w == 0.0)
    }

    pub fn to_bundle(&self) -> ParamBundle {
        let mut b = ParamBundle::new();
        b.insert(
            ADAPTER_TENSOR,
            Tensor::new(KERNEL_SHAPE.to_vec(), self.layer.weights.clone()).unwrap(),
        );
        b
    }

    pub fn from_bundle(b: &ParamBundle) -> Result<Self> {
        Ok(AdapterParams {
            layer: ConvLayer::from_weights(b.require(ADAPTER_TENSOR)?.data.clone())?,
        })
    }
}

/// Replicates the image planes into every channel: `[re, im]` to
/// `[re x C, im x C]`.
pub fn lift(image_planar: &[f64], channels: usize) -> Vec<f64> {
    let n = image_planar.len() / 2;
    let (re, im) = image_planar.split_at(n);
    let mut out = Vec::with_capacity(2 * channels * n);
    for _ in 0..channels {
        out.extend_from_slice(re);
    }
    for _ in 0..channels {
        out.extend_from_slice(im);
    }
    out
}

/// Adjoint of [`lift`]: sums the real planes and the imaginary planes.
pub fn unlift(planes: &[f64], channels: usize) -> Vec<f64> {
    let n = planes.len() / (2 * channels);
    let mut out = vec![0.0; 2 * n];
    for (c, plane) in planes.chunks_exact(n).enumerate() {
        let dst = if c < channels { 0 } else { n };
        for (o, v) in out[dst..dst + n].iter_mut().zip(plane) {
            *o += v;
        }
    }
    out
}

/// Evaluated feature map at one point: the planar features plus whatever
/// intermediate values the map needs for its pullback.
#[derive(Debug, Clone)]
pub struct FeatureEval {
    pub height: usize,
    pub width: usize,
    /// Planar features, `2 * channels` planes of `height * width` samples.
    pub q: Vec<f64>,
    pub cache: Vec<Vec<f64>>,
}

impl FeatureEval {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn row_norms(&self) -> Vec<f64> {
        crate::tensor::planar_row_norms(&self.q, self.pixels())
    }
}

/// A smooth map from a complex image to one complex feature vector per
/// pixel, with a vector-Jacobian product.
pub trait FeatureMap: Sync {
    /// Complex channels per pixel.
    fn channels(&self) -> usize;

    /// `x` is a planar image `[re, im]`.
    fn eval(&self, height: usize, width: usize, x: &[f64]) -> FeatureEval;

    /// Pulls a planar feature cotangent `w` back to a planar image
    /// cotangent (real-pair convention).
    fn pullback(&self, eval: &FeatureEval, w: &[f64]) -> Vec<f64>;
}

/// The composition `q = h(g(x))`.
#[derive(Debug, Clone, Copy)]
pub struct QNet<'a> {
    pub extractor: &'a ExtractorParams,
    pub adapter: &'a AdapterParams,
    pub activation: SmoothedRelu,
}

impl<'a> QNet<'a> {
    pub fn new(
        extractor: &'a ExtractorParams,
        adapter: &'a AdapterParams,
        activation: SmoothedRelu,
    ) -> Self {
        QNet {
            extractor,
            adapter,
            activation,
        }
    }

    /// Extractor output `g(x)` as planes.
    pub fn extract(&self, height: usize, width: usize, x: &[f64]) -> Vec<f64> {
        let mut h = lift(x, CHANNELS);
        for layer in &self.extractor.layers {
            let mut pre = layer.apply(height, width, &h);
            for v in pre.iter_mut() {
                *v = self.activation.value(*v);
            }
            h = pre;
        }
        h
    }
}

impl FeatureMap for QNet<'_> {
    fn channels(&self) -> usize {
        CHANNELS
    }

    fn eval(&self, height: usize, width: usize, x: &[f64]) -> FeatureEval {
        let mut cache = Vec::with_capacity(EXTRACTOR_LAYERS);
        let mut h = lift(x, CHANNELS);
        for layer in &self.extractor.layers {
            let pre = layer.apply(height, width, &h);
            h = pre.iter().map(|&v| self.activation.value(v)).collect();
            cache.push(pre);
        }
        let q = if self.adapter.is_zero() {
            vec![0.0; h.len()]
        } else {
            self.adapter.layer.apply(height, width, &h)
        };
        FeatureEval {
            height,
            width,
            q,
            cache,
        }
    }

    fn pullback(&self, eval: &FeatureEval, w: &[f64]) -> Vec<f64> {
        let (hgt, wid) = (eval.height, eval.width);
        if self.adapter.is_zero() {
            return vec![0.0; 2 * hgt * wid];
        }
        let mut d = self.adapter.layer.apply_adjoint(hgt, wid, w);
        for (layer, pre) in self.extractor.layers.iter().zip(&eval.cache).rev() {
            for (g, &p) in d.iter_mut().zip(pre) {
                *g *= self.activation.derivative(p);
            }
            d = layer.apply_adjoint(hgt, wid, &d);
        }
        unlift(&d, CHANNELS)
    }
}

/// `g(x)` as a feature stack of `n` pixels by 16 channels.
pub fn extractor_forward(x: &ComplexImage, p: &ExtractorParams, act: SmoothedRelu) -> FeatureStack {
    let adapter = AdapterParams::zeros();
    let net = QNet::new(p, &adapter, act);
    let planes = net.extract(x.height(), x.width(), &x.to_planar());
    FeatureStack::from_planar(x.len(), CHANNELS, &planes).expect("extractor output layout")
}

/// `h(gx)`; `grid` is the `(height, width)` of the pixel layout.
pub fn adapter_forward(
    gx: &FeatureStack,
    grid: (usize, usize),
    p: &AdapterParams,
) -> Result<FeatureStack> {
    if gx.channels() != CHANNELS {
        return Err(Error::Shape(format!(
            "adapter expects {CHANNELS} channels, got {}",
            gx.channels()
        )));
    }
    if grid.0 * grid.1 != gx.pixels() {
        return Err(Error::Shape(format!(
            "grid {grid:?} does not cover {} pixels",
            gx.pixels()
        )));
    }
    let out = p.layer.apply(grid.0, grid.1, &gx.to_planar());
    FeatureStack::from_planar(gx.pixels(), CHANNELS, &out)
}

/// Identity feature map `q(x) = x`: one complex channel per pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl FeatureMap for IdentityMap {
    fn channels(&self) -> usize {
        1
    }

    fn eval(&self, height: usize, width: usize, x: &[f64]) -> FeatureEval {
        FeatureEval {
            height,
            width,
            q: x.to_vec(),
            cache: Vec::new(),
        }
    }

    fn pullback(&self, _eval: &FeatureEval, w: &[f64]) -> Vec<f64> {
        w.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = seeded_rng(seed);
        let data = (0..h * w)
            .map(|_| Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng)))
            .collect();
        ComplexImage::new(h, w, data).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let g = ExtractorParams::init(1, InitScheme::GlorotLike);
        assert_eq!(g.param_count(), 36_864);
        assert_eq!(g.to_bundle().scalar_count(), 36_864);
        assert_eq!(AdapterParams::identity().param_count(), 9_216);
    }

    #[test]
    fn complex_tap_multiplies() {
        // kernel i on input 1 gives i
        let mut layer = ConvLayer::zeros();
        layer.set_complex_tap(0, 0, 4, Complex64::new(0.0, 1.0));
        let img = ComplexImage::from_real(1, 1, &[1.0]).unwrap();
        let planes = lift(&img.to_planar(), CHANNELS);
        let out = layer.apply(1, 1, &planes);
        let stack = FeatureStack::from_planar(1, CHANNELS, &out).unwrap();
        assert_eq!(stack.row(0)[0], Complex64::new(0.0, 1.0));
        assert!(stack.row(0)[1..].iter().all(|z| z.norm() == 0.0));

        // general complex product
        let mut layer = ConvLayer::zeros();
        let w = Complex64::new(0.5, -2.0);
        layer.set_complex_tap(3, 0, 4, w);
        let x = Complex64::new(1.5, 0.25);
        let img = ComplexImage::new(1, 1, vec![x]).unwrap();
        let out = layer.apply(1, 1, &lift(&img.to_planar(), CHANNELS));
        let stack = FeatureStack::from_planar(1, CHANNELS, &out).unwrap();
        assert!((stack.row(0)[3] - w * x).norm() < 1e-15);
    }

    /// Dense single-channel complex convolution written as a matrix product.
    #[test]
    fn single_channel_conv_matches_dense_matrix() {
        let (h, w) = (4, 4);
        let n = h * w;
        let mut rng = seeded_rng(12);
        let taps: Vec<Complex64> = (0..9)
            .map(|_| Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng)))
            .collect();
        let mut layer = ConvLayer::zeros();
        for (t, &z) in taps.iter().enumerate() {
            layer.set_complex_tap(0, 0, t, z);
        }
        let x = random_image(h, w, 13);
        // channel 0 carries x, all other input channels are zero
        let mut planes = vec![0.0; REAL_CHANNELS * n];
        let xp = x.to_planar();
        planes[..n].copy_from_slice(&xp[..n]);
        planes[CHANNELS * n..(CHANNELS + 1) * n].copy_from_slice(&xp[n..]);
        let out = layer.apply(h, w, &planes);

        let mut dense = vec![Complex64::new(0.0, 0.0); n * n];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for t in 0..9 {
                    let sy = y + t as isize / 3 - 1;
                    let sx = xx + t as isize % 3 - 1;
                    if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                        dense[(y * w as isize + xx) as usize * n
                            + (sy * w as isize + sx) as usize] += taps[t];
                    }
                }
            }
        }
        for k in 0..n {
            let expect: Complex64 = (0..n).map(|j| dense[k * n + j] * x.data()[j]).sum();
            let got = Complex64::new(out[k], out[CHANNELS * n + k]);
            assert!((expect - got).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_params_and_zero_input_give_zero_features() {
        let x = random_image(8, 8, 2);
        let g0 = ExtractorParams::zeros();
        let out = extractor_forward(&x, &g0, SmoothedRelu::default());
        assert!(out.data().iter().all(|z| z.norm() == 0.0));

        let g = ExtractorParams::init(4, InitScheme::GlorotLike);
        let out = extractor_forward(&ComplexImage::zeros(8, 8), &g, SmoothedRelu::default());
        assert!(out.data().iter().all(|z| z.norm() == 0.0));

        let out = extractor_forward(&random_image(32, 32, 1), &g, SmoothedRelu::default());
        assert_eq!((out.pixels(), out.channels()), (1024, 16));
    }

    #[test]
    fn identity_adapter_passes_through() {
        let g = ExtractorParams::init(4, InitScheme::GlorotLike);
        let x = random_image(8, 8, 3);
        let gx = extractor_forward(&x, &g, SmoothedRelu::default());
        let id = AdapterParams::init(0, InitScheme::Identity);
        let out = adapter_forward(&gx, (8, 8), &id).unwrap();
        assert_eq!(out, gx);
        let zero = adapter_forward(&gx, (8, 8), &AdapterParams::zeros()).unwrap();
        assert!(zero.data().iter().all(|z| z.norm() == 0.0));
        let bad = FeatureStack::zeros(64, 3);
        assert!(adapter_forward(&bad, (8, 8), &id).is_err());
    }

    #[test]
    fn init_is_deterministic_with_target_spread() {
        let a = ExtractorParams::init(9, InitScheme::GlorotLike);
        assert_eq!(a, ExtractorParams::init(9, InitScheme::GlorotLike));
        assert_ne!(a, ExtractorParams::init(10, InitScheme::GlorotLike));
        let draws: Vec<f64> = a
            .layers()
            .iter()
            .flat_map(|l| l.weights().to_vec())
            .take(10_000)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let rel = (var.sqrt() - glorot_std()).abs() / glorot_std();
        assert!(rel < 0.05, "relative std error {rel}");
        assert!("bogus".parse::<InitScheme>().is_err());
    }

    #[test]
    fn averaging_extractors() {
        let a = ExtractorParams::init(1, InitScheme::GlorotLike);
        assert_eq!(
            ExtractorParams::average(&[a.clone(), a.clone()]).unwrap(),
            a
        );
        let neg = ExtractorParams::from_bundle(&{
            let mut b = a.to_bundle();
            b.iter_mut()
                .for_each(|(_, t)| t.data.iter_mut().for_each(|v| *v = -*v));
            b
        })
        .unwrap();
        let mid = ExtractorParams::average(&[a, neg]).unwrap();
        assert_eq!(mid, ExtractorParams::zeros());
    }

    #[test]
    fn qnet_pullback_matches_finite_differences() {
        let g = ExtractorParams::init(21, InitScheme::GlorotLike);
        let h = AdapterParams::init(22, InitScheme::GlorotLike);
        let net = QNet::new(&g, &h, SmoothedRelu::new(0.05).unwrap());
        let x = random_image(4, 4, 5).to_planar();
        let eval = net.eval(4, 4, &x);
        let mut rng = seeded_rng(6);
        let w: Vec<f64> = (0..eval.q.len())
            .map(|_| standard_normal(&mut rng))
            .collect();
        let grad = net.pullback(&eval, &w);
        let obj = |xp: &[f64]| -> f64 {
            net.eval(4, 4, xp)
                .q
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let step = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += step;
            let mut xm = x.clone();
            xm[k] -= step;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * step);
            assert!(
                (fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1.0),
                "coordinate {k}: fd {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn lift_unlift_are_adjoint() {
        let mut rng = seeded_rng(8);
        let x: Vec<f64> = (0..2 * 6).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..2 * 3 * 6).map(|_| standard_normal(&mut rng)).collect();
        let lx = lift(&x, 3);
        let lhs: f64 = lx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&unlift(&y, 3)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
