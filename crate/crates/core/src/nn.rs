//! Multilayer perceptrons, momentum SGD and the binary checkpoint codec.

use rand::distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    None,
    Softmax,
    Sigmoid,
}

impl Head {
    fn code(self) -> u8 {
        match self {
            Head::None => 0,
            Head::Softmax => 1,
            Head::Sigmoid => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Head::None,
            1 => Head::Softmax,
            2 => Head::Sigmoid,
            _ => return Err(Error::Data(format!("unknown head code {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

/// Linear layers with ReLU between them and an optional output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<LinearLayer>,
    head: Head,
}

/// Leaf handles of one network registered on a graph.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Tensor, Tensor)>,
}

impl MlpVars {
    /// Handles in [`Mlp::params`] order: weight, bias, weight, bias, ...
    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(Error::Contract(format!(
                "expected weight/bias pairs, got {} tensors",
                tensors.len()
            )));
        }
        Ok(MlpVars {
            layers: tensors.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    /// Parameters in the same order as [`Mlp::params`].
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn grads(&self, g: &Graph) -> Vec<Matrix> {
        self.tensors().into_iter().map(|t| g.grad(t)).collect()
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_network(sizes: &[usize], head: Head, seed: u64) -> Result<Mlp> {
    if sizes.len() < 2 {
        return Err(Error::Config(format!(
            "network needs at least an input and an output size, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be >= 1, got {sizes:?}")));
    }
    let mut rng = seeded(seed);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = glorot_bound(fan_in, fan_out);
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            LinearLayer {
                weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
                bias: Matrix::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(Mlp {
        sizes: sizes.to_vec(),
        layers,
        head,
    })
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Mlp {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn register_frozen(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.constant(l.weight.clone()), g.constant(l.bias.clone())))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: Tensor) -> Result<Tensor> {
        if x.cols() != self.input_size() {
            return Err(Error::Shape {
                op: "mlp input",
                lhs: (x.rows(), self.input_size()),
                rhs: x.shape(),
            });
        }
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add_bias(z, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        match self.head {
            Head::None => Ok(h),
            Head::Softmax => g.softmax_rows(h),
            Head::Sigmoid => Ok(g.sigmoid(h)),
        }
    }

    /// Forward pass outside any training graph.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let vars = self.register_frozen(&mut g);
        let xt = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xt)?;
        Ok(g.value(out).clone())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|m| m.all_finite())
    }

    pub(crate) fn encode(&self, w: &mut Vec<u8>) {
        codec::put_u32(w, self.sizes.len() as u32);
        for &s in &self.sizes {
            codec::put_u64(w, s as u64);
        }
        w.push(self.head.code());
        for p in self.params() {
            codec::put_f64s(w, p.as_slice());
        }
    }

    pub(crate) fn decode(r: &mut codec::Reader<'_>) -> Result<Self> {
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Data(format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::from_code(r.u8()?)?;
        let mut net = init_network(&sizes, head, 0)?;
        for p in net.params_mut() {
            let len = p.len();
            p.as_mut_slice().copy_from_slice(&r.f64s(len)?);
        }
        Ok(net)
    }
}

/// Feature extractor: no output head.
pub fn forward_g(net: &Mlp, g: &mut Graph, vars: &MlpVars, x: Tensor) -> Result<Tensor> {
    expect_head(net, Head::None, "feature extractor")?;
    net.forward(g, vars, x)
}

/// Classifier: softmax head, rows are class distributions.
pub fn forward_f(net: &Mlp, g: &mut Graph, vars: &MlpVars, feats: Tensor) -> Result<Tensor> {
    expect_head(net, Head::Softmax, "classifier")?;
    net.forward(g, vars, feats)
}

/// Discriminator: sigmoid head, one domain probability per row.
pub fn forward_d(net: &Mlp, g: &mut Graph, vars: &MlpVars, conditioned: Tensor) -> Result<Tensor> {
    expect_head(net, Head::Sigmoid, "discriminator")?;
    if conditioned.cols() != net.input_size() {
        return Err(Error::Shape {
            op: "discriminator input (expected vs actual)",
            lhs: (conditioned.rows(), net.input_size()),
            rhs: conditioned.shape(),
        });
    }
    net.forward(g, vars, conditioned)
}

fn expect_head(net: &Mlp, head: Head, role: &str) -> Result<()> {
    if net.head != head {
        return Err(Error::Config(format!(
            "{role} needs head {head:?}, network has {:?}",
            net.head
        )));
    }
    Ok(())
}

/// Momentum SGD: `v <- mu v + g`, `theta <- theta - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl SgdMomentum {
    pub fn new(net: &Mlp, lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: net
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }

    /// Applies one update with learning rate `lr * lr_scale`.
    pub fn step(&mut self, net: &mut Mlp, grads: &[Matrix], lr_scale: f64) -> Result<()> {
        let mut params = net.params_mut();
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer step needs {} gradients, got {}",
                params.len(),
                grads.len()
            )));
        }
        for ((p, v), g) in params.iter_mut().zip(&self.velocity).zip(grads) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        let lr = self.lr * lr_scale;
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            for ((pp, vv), &gg) in p
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *vv = self.momentum * *vv + gg;
                *pp -= lr * *vv;
            }
        }
        Ok(())
    }

    pub(crate) fn encode(&self, w: &mut Vec<u8>) {
        codec::put_f64(w, self.lr);
        codec::put_f64(w, self.momentum);
        for v in &self.velocity {
            codec::put_f64s(w, v.as_slice());
        }
    }

    pub(crate) fn decode(r: &mut codec::Reader<'_>, net: &Mlp) -> Result<Self> {
        let lr = r.f64()?;
        let momentum = r.f64()?;
        let mut opt = SgdMomentum::new(net, lr, momentum);
        for v in &mut opt.velocity {
            let len = v.len();
            v.as_mut_slice().copy_from_slice(&r.f64s(len)?);
        }
        Ok(opt)
    }
}

/// Little-endian binary primitives shared by the checkpoint formats.
pub(crate) mod codec {
    use crate::error::{Error, Result};

    pub fn put_u32(w: &mut Vec<u8>, v: u32) {
        w.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(w: &mut Vec<u8>, v: u64) {
        w.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(w: &mut Vec<u8>, v: f64) {
        w.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
        for &v in vs {
            put_f64(w, v);
        }
    }

    pub struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(buf: &'a [u8]) -> Self {
            Reader { buf, pos: 0 }
        }

        pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.buf.len() {
                return Err(Error::Data(format!(
                    "truncated checkpoint: need {n} bytes at offset {}",
                    self.pos
                )));
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        pub fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        pub fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        pub fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            (0..n).map(|_| self.f64()).collect()
        }

        pub fn is_done(&self) -> bool {
            self.pos == self.buf.len()
        }
    }
}
