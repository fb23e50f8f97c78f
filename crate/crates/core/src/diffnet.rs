//! A minimal differentiable network: dense layers with ReLU or identity
//! activations, an optional residual connection around the whole stack,
//! exact reverse-mode gradients and plain SGD.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{LdcError, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

const NET_MAGIC: &[u8; 4] = b"LDCN";
const NET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Self::Relu => 1,
            Self::Identity => 0,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::Identity),
            1 => Ok(Self::Relu),
            other => Err(LdcError::BadSpec(format!("unknown activation code {other}"))),
        }
    }
}

/// `y = act(W x + b)` with `W` of shape out×in.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    layers: Vec<Layer<T>>,
    residual: bool,
}

/// Per-layer gradients, shaped like the network they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

/// Activations recorded by [`Net::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    layer_inputs: Vec<Matrix<T>>,
    pre_activations: Vec<Matrix<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    He,
    Xavier,
}

impl<T: Real> Net<T> {
    pub fn new(layers: Vec<Layer<T>>, residual: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(LdcError::BadSpec("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(LdcError::BadSpec(format!("layer {k}: bias length")));
            }
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(LdcError::BadSpec(format!("layer {k}: zero width")));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(LdcError::BadSpec(format!(
                    "layer {k} expects {} inputs but layer {} produces {}",
                    layer.in_dim(),
                    k - 1,
                    layers[k - 1].out_dim()
                )));
            }
        }
        let net = Self { layers, residual };
        if residual && net.input_dim() != net.output_dim() {
            return Err(LdcError::BadSpec(
                "residual network must have equal input and output width".into(),
            ));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    /// Same architecture, every parameter zero.
    pub fn zeroed(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                bias: vec![T::zero(); l.out_dim()],
                activation: l.activation,
            })
            .collect();
        Self {
            layers,
            residual: self.residual,
        }
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the `idx`-th parameter in [`Net::flat_params`] order.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut T {
        for l in &mut self.layers {
            let nw = l.weights.rows() * l.weights.cols();
            if idx < nw {
                return &mut l.weights.as_mut_slice()[idx];
            }
            idx -= nw;
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(LdcError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        if !x.is_finite() {
            return Err(LdcError::NonFinite);
        }
        Ok(())
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = affine(layer, &h)?;
            let a = match layer.activation {
                Activation::Relu => z.map(|v| v.max(T::zero())),
                Activation::Identity => z.clone(),
            };
            layer_inputs.push(h);
            pre_activations.push(z);
            h = a;
        }
        if self.residual {
            h.axpy(T::one(), x)?;
        }
        Ok((
            h,
            ForwardCache {
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = affine(layer, &h)?;
            if layer.activation == Activation::Relu {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            h = z;
        }
        if self.residual {
            h.axpy(T::one(), x)?;
        }
        Ok(h)
    }

    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict(&m)?.into_vec())
    }

    /// Reverse pass: parameter gradients and the gradient with respect to
    /// the batch input, given `∂L/∂output`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        upstream: &Matrix<T>,
    ) -> Result<(GradBundle<T>, Matrix<T>)> {
        if cache.layer_inputs.len() != self.layers.len()
            || cache.pre_activations.len() != self.layers.len()
        {
            return Err(LdcError::StaleCache);
        }
        let n = cache.layer_inputs[0].rows();
        for (layer, (inp, pre)) in self
            .layers
            .iter()
            .zip(cache.layer_inputs.iter().zip(&cache.pre_activations))
        {
            if inp.shape() != (n, layer.in_dim()) || pre.shape() != (n, layer.out_dim()) {
                return Err(LdcError::StaleCache);
            }
        }
        if upstream.shape() != (n, self.output_dim()) {
            return Err(LdcError::StaleCache);
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut grad = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                let pre = &cache.pre_activations[k];
                for (g, &z) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            weights.push(grad.t_matmul(&cache.layer_inputs[k])?);
            let mut db = vec![T::zero(); layer.out_dim()];
            for row in grad.row_iter() {
                for (b, &g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            biases.push(db);
            grad = grad.matmul(&layer.weights)?;
        }
        weights.reverse();
        biases.reverse();
        if self.residual {
            grad.axpy(T::one(), upstream)?;
        }
        Ok((GradBundle { weights, biases }, grad))
    }

    /// `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &GradBundle<T>, lr: T) -> Result<()> {
        if !(lr > T::zero()) {
            return Err(LdcError::InvalidParameter("learning rate must be positive".into()));
        }
        grads.check_matches(self)?;
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            layer.weights.axpy(-lr, gw)?;
            for (b, &g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        Ok(())
    }

    /// Serializes as `LDCN`: version, layer count, residual flag, then per
    /// layer `in`, `out`, activation code, row-major weights and bias as
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        self.write_to(&mut w);
        w.buf
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.magic(NET_MAGIC);
        w.u32(NET_VERSION);
        w.u32(self.layers.len() as u32);
        w.u8(u8::from(self.residual));
        for l in &self.layers {
            w.u32(l.in_dim() as u32);
            w.u32(l.out_dim() as u32);
            w.u8(l.activation.code());
            w.f64s(l.weights.as_slice().iter().map(|v| v.as_f64()));
            w.f64s(l.bias.iter().map(|v| v.as_f64()));
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let net = Self::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(LdcError::BadSpec("trailing bytes after network".into()));
        }
        Ok(net)
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(NET_MAGIC, "LDCN")?;
        let version = r.u32()?;
        if version != NET_VERSION {
            return Err(LdcError::BadVersion(version));
        }
        let n_layers = r.u32()? as usize;
        let residual = r.u8()? != 0;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let activation = Activation::from_code(r.u8()?)?;
            let w = r.f64s(in_dim * out_dim)?;
            let b = r.f64s(out_dim)?;
            layers.push(Layer {
                weights: Matrix::from_vec(out_dim, in_dim, w.into_iter().map(T::lit).collect())?,
                bias: b.into_iter().map(T::lit).collect(),
                activation,
            });
        }
        Self::new(layers, residual)
    }
}

fn affine<T: Real>(layer: &Layer<T>, h: &Matrix<T>) -> Result<Matrix<T>> {
    let mut z = h.matmul_t(&layer.weights)?;
    for r in 0..z.rows() {
        for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

impl<T: Real> GradBundle<T> {
    pub fn zeros_like(net: &Net<T>) -> Self {
        let z = net.zeroed();
        Self {
            weights: z.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: z.layers.iter().map(|l| l.bias.clone()).collect(),
        }
    }

    fn check_matches(&self, net: &Net<T>) -> Result<()> {
        let ok = self.weights.len() == net.layers.len()
            && self.biases.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(k, l)| {
                self.weights[k].shape() == l.weights.shape() && self.biases[k].len() == l.bias.len()
            });
        if ok {
            Ok(())
        } else {
            Err(LdcError::DimensionMismatch {
                expected: net.param_count(),
                found: self.flat().len(),
            })
        }
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(LdcError::DimensionMismatch {
                expected: self.weights.len(),
                found: other.weights.len(),
            });
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(T::one(), b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Same order as [`Net::flat_params`].
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> T {
        self.flat().iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Builds a network with ReLU hidden layers and an identity output layer.
/// Weights are Gaussian with the scheme's variance; biases start at zero.
pub fn init_net<T: Real>(
    sizes: &[usize],
    scheme: InitScheme,
    residual: bool,
    rng_seed: u64,
) -> Result<Net<T>> {
    if sizes.len() < 2 {
        return Err(LdcError::BadSpec(
            "need at least an input and an output width".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(LdcError::BadSpec("layer widths must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_layers = sizes.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
        let var = match scheme {
            InitScheme::He => 2.0 / fan_in as f64,
            InitScheme::Xavier => 2.0 / (fan_in + fan_out) as f64,
        };
        let dist = Normal::new(0.0, var.sqrt()).expect("positive variance");
        let weights = Matrix::from_fn(fan_out, fan_in, |_, _| T::lit(dist.sample(&mut rng)));
        layers.push(Layer {
            weights,
            bias: vec![T::zero(); fan_out],
            activation: if k + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            },
        });
    }
    Net::new(layers, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_layer(d: usize) -> Layer<f64> {
        Layer {
            weights: Matrix::identity(d),
            bias: vec![0.0; d],
            activation: Activation::Identity,
        }
    }

    #[test]
    fn zero_residual_net_is_identity() {
        let net = init_net::<f64>(&[3, 8, 3], InitScheme::He, true, 1).unwrap().zeroed();
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64) - 0.3 * j as f64);
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Net::new(vec![identity_layer(3)], false).unwrap();
        assert_eq!(net.forward_vec(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let net = init_net::<f64>(&[4, 6, 2], InitScheme::He, false, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let mut h = [0.0; 6];
        for i in 0..6 {
            let mut s = l0.bias[i];
            for j in 0..4 {
                s += l0.weights[(i, j)] * x[j];
            }
            h[i] = if s > 0.0 { s } else { 0.0 };
        }
        let y = net.forward_vec(&x).unwrap();
        for i in 0..2 {
            let mut s = l1.bias[i];
            for j in 0..6 {
                s += l1.weights[(i, j)] * h[j];
            }
            assert!((y[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = init_net::<f64>(&[4, 2], InitScheme::He, false, 3).unwrap();
        assert!(matches!(
            net.forward(&Matrix::zeros(1, 3)),
            Err(LdcError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_least_squares_gradient() {
        let net = init_net::<f64>(&[3, 2], InitScheme::Xavier, false, 5).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let y = vec![1.0, -0.5];
        let xm = Matrix::from_vec(1, 3, x.clone()).unwrap();
        let (out, cache) = net.forward(&xm).unwrap();
        let resid: Vec<f64> = out.as_slice().iter().zip(&y).map(|(a, b)| a - b).collect();
        let up = Matrix::from_vec(1, 2, resid.clone()).unwrap();
        let (g, _) = net.backward(&cache, &up).unwrap();
        let expected = Matrix::outer(&resid, &x);
        assert!(g.weights[0].max_abs_diff(&expected) < 1e-14);
        assert_eq!(g.biases[0], resid);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = init_net::<f64>(&[3, 5, 3], InitScheme::He, true, 2).unwrap();
        let x = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let (_, cache) = net.forward(&x).unwrap();
        let (g, gx) = net.backward(&cache, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = init_net::<f64>(&[3, 5, 3], InitScheme::He, false, 2).unwrap();
        let b = init_net::<f64>(&[3, 4, 3], InitScheme::He, false, 2).unwrap();
        let (_, cache) = a.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            b.backward(&cache, &Matrix::zeros(2, 3)),
            Err(LdcError::StaleCache)
        ));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = Net::<f64>::new(
            vec![Layer {
                weights: Matrix::diag(&[1.0]),
                bias: vec![0.0],
                activation: Activation::Identity,
            }],
            false,
        )
        .unwrap();
        let mut g = GradBundle::zeros_like(&net);
        let before = net.clone();
        net.sgd_step(&g, 0.1).unwrap();
        assert_eq!(net, before);
        g.weights[0][(0, 0)] = 2.0;
        net.sgd_step(&g, 0.1).unwrap();
        assert!((net.layers()[0].weights[(0, 0)] - 0.8).abs() < 1e-15);
        assert!(net.sgd_step(&g, 0.0).is_err());
    }

    #[test]
    fn sgd_converges_on_convex_quadratic() {
        // one weight, input 1: output w, loss ½(w − 3)²
        let mut net = Net::<f64>::new(
            vec![Layer {
                weights: Matrix::diag(&[0.0]),
                bias: vec![0.0],
                activation: Activation::Identity,
            }],
            false,
        )
        .unwrap();
        let x = Matrix::diag(&[1.0]);
        let mut steps = 0;
        loop {
            let (y, cache) = net.forward(&x).unwrap();
            let w = net.layers()[0].weights[(0, 0)];
            if (w - 3.0).abs() < 1e-6 {
                break;
            }
            let up = Matrix::diag(&[y[(0, 0)] - 3.0]);
            let (mut g, _) = net.backward(&cache, &up).unwrap();
            g.biases[0][0] = 0.0;
            net.sgd_step(&g, 0.1).unwrap();
            steps += 1;
            assert!(steps <= 200, "did not converge");
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = init_net::<f64>(&[4, 4], InitScheme::He, false, 42).unwrap();
        let b = init_net::<f64>(&[4, 4], InitScheme::He, false, 42).unwrap();
        assert_eq!(a, b);
        assert!(matches!(init_net::<f64>(&[], InitScheme::He, false, 0), Err(LdcError::BadSpec(_))));
        assert!(matches!(init_net::<f64>(&[4], InitScheme::He, false, 0), Err(LdcError::BadSpec(_))));
        assert!(matches!(init_net::<f64>(&[3, 4], InitScheme::He, true, 0), Err(LdcError::BadSpec(_))));
    }

    #[test]
    fn he_variance_matches_fan_in() {
        let net = init_net::<f64>(&[100, 100], InitScheme::He, false, 7).unwrap();
        let w = net.layers()[0].weights.as_slice();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var}");
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let net = init_net::<f64>(&[3, 7, 3], InitScheme::He, true, 9).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"LDCN");
        assert_eq!(Net::<f64>::from_bytes(&bytes).unwrap(), net);
        assert!(matches!(Net::<f64>::from_bytes(&bytes[..bytes.len() - 3]), Err(LdcError::TruncatedFile)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Net::<f64>::from_bytes(&bad), Err(LdcError::BadMagic { .. })));
    }

    #[test]
    fn single_precision_network_runs() {
        let net = init_net::<f32>(&[3, 4, 3], InitScheme::He, true, 1).unwrap();
        let (y, cache) = net.forward(&Matrix::from_fn(2, 3, |i, j| (i + j) as f32)).unwrap();
        let (g, _) = net.backward(&cache, &y).unwrap();
        assert_eq!(g.weights[0].shape(), (4, 3));
    }
}
