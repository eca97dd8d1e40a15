//! Extractor and discriminator networks.
//!
//! Both are small fully connected networks stored as [`Mlp`]: tanh between
//! layers, linear output. The discriminator appends a sigmoid to its single
//! output unit.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::graph::sigmoid;
use crate::numerics::{Gradients, Graph, Matrix, Var};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Lower/upper clamp applied to discriminator probabilities before logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: Matrix,
    /// `1 x fan_out`
    pub bias: Matrix,
}

/// Fully connected network: `activation` between layers, none after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Extractor parameters (θ).
pub type ExtractorParams = Mlp;

/// Discriminator parameters (φ): `d_f → hidden → 1`, sigmoid on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub net: Mlp,
}

/// Mlp parameters bound as leaves on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    activation: Activation,
}

impl Mlp {
    /// LeCun-uniform weights `U(−√(3/fan_in), √(3/fan_in))`, zero biases.
    pub fn init(arch: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if arch.len() < 2 {
            return Err(Error::invalid(format!(
                "architecture needs input and output dims, got {arch:?}"
            )));
        }
        if arch.contains(&0) {
            return Err(Error::invalid(format!("zero-width layer in {arch:?}")));
        }
        let mut rng = rng_from_seed(seed);
        let layers = arch
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (3.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn arch(&self) -> Vec<usize> {
        let mut a = vec![self.input_dim()];
        a.extend(self.layers.iter().map(|l| l.weight.cols()));
        a
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flattened parameters, layer by layer, weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for l in &mut out.layers {
            for m in [&mut l.weight, &mut l.bias] {
                let n = m.len();
                m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Plain forward pass over one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} dims, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = l.weight.shape();
            let mut next = l.bias.as_slice().to_vec();
            for k in 0..fan_in {
                let hk = h[k];
                for (o, w) in next.iter_mut().zip(&l.weight.as_slice()[k * fan_out..(k + 1) * fan_out]) {
                    *o += hk * w;
                }
            }
            if li != last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = next;
        }
        Ok(h)
    }

    /// Forward pass over a batch (one row per instance).
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?;
            for i in 0..h.rows() {
                for (v, b) in h.row_mut(i).iter_mut().zip(l.bias.as_slice()) {
                    *v += b;
                }
            }
            if li != last {
                h = h.map(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            vars: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
                .collect(),
            activation: self.activation,
        }
    }

    /// Gradients for every layer in the same layout as `self`.
    pub fn grads_from(&self, bound: &BoundMlp, grads: &Gradients) -> Mlp {
        Mlp {
            layers: bound
                .vars
                .iter()
                .map(|(w, b)| Layer {
                    weight: grads.wrt(*w),
                    bias: grads.wrt(*b),
                })
                .collect(),
            activation: self.activation,
        }
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.vars.len() - 1;
        for (li, (w, b)) in self.vars.iter().enumerate() {
            h = g.matmul(h, *w)?;
            h = g.add_row(h, *b)?;
            if li != last && self.activation == Activation::Tanh {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Fresh extractor for the architecture `arch` (input dim first).
pub fn init_extractor(arch: &[usize], seed: u64) -> Result<ExtractorParams> {
    Mlp::init(arch, Activation::Tanh, seed)
}

/// Encodes one instance.
pub fn encode(theta: &ExtractorParams, x: &[f64]) -> Result<Vec<f64>> {
    theta.forward(x)
}

impl DiscriminatorParams {
    pub fn init(feature_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Mlp::init(&[feature_dim, hidden, 1], Activation::Tanh, seed)?,
        })
    }

    pub fn zeros(feature_dim: usize, hidden: usize) -> Self {
        let net = Mlp::init(&[feature_dim, hidden, 1], Activation::Tanh, 0).expect("valid arch");
        let zeros = vec![0.0; net.param_count()];
        Self {
            net: net.with_flat(&zeros).expect("sized"),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.net.bind(g)
    }

    /// Source-domain probabilities for a batch of features (`n x 1`),
    /// clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn forward_graph(bound: &BoundMlp, g: &mut Graph, features: Var) -> Result<Var> {
        let logit = bound.forward(g, features)?;
        let p = g.sigmoid(logit);
        Ok(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }
}

/// Probability that `f` was drawn from the source domain, in `(0, 1)`.
pub fn discriminate(phi: &DiscriminatorParams, f: &[f64]) -> Result<f64> {
    let logit = phi.net.forward(f)?[0];
    Ok(sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(Self { lr })
    }
}

/// `p ← p − η·g`. Rejects the whole update if any gradient is non-finite.
pub fn sgd_step(params: &mut Mlp, grads: &Mlp, opt: OptimizerState) -> Result<()> {
    if params.arch() != grads.arch() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match parameters {:?}",
            grads.arch(),
            params.arch()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient, update rejected".into()));
    }
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        for (pm, gm) in [(&mut p.weight, &g.weight), (&mut p.bias, &g.bias)] {
            for (x, d) in pm.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                *x -= opt.lr * d;
            }
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "dafec-params v1";

/// Named networks persisted together in one checkpoint file.
///
/// Layout (UTF-8 text, one item per line):
///
/// ```text
/// dafec-params v1
/// network <name> <activation> <n_layers>
/// tensor <name>.<layer>.weight <rows> <cols>
/// <rows*cols whitespace-separated values, row-major>
/// tensor <name>.<layer>.bias 1 <cols>
/// <values>
/// ```
///
/// Values are written in shortest round-trip decimal form, so a reload is
/// bit-identical.
pub fn write_checkpoint(path: &Path, nets: &[(&str, &Mlp)]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    for (name, net) in nets {
        let act = match net.activation {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        };
        writeln!(out, "network {name} {act} {}", net.layers.len()).unwrap();
        for (i, l) in net.layers.iter().enumerate() {
            for (kind, m) in [("weight", &l.weight), ("bias", &l.bias)] {
                writeln!(out, "tensor {name}.{i}.{kind} {} {}", m.rows(), m.cols()).unwrap();
                let vals: Vec<String> = m.as_slice().iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", vals.join(" ")).unwrap();
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Mlp)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text).map_err(|m| Error::parse(path, m))
}

fn parse_checkpoint(text: &str) -> std::result::Result<Vec<(String, Mlp)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(format!("missing `{CHECKPOINT_MAGIC}` header"));
    }
    let mut nets = Vec::new();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let ["network", name, act, n] = parts.as_slice() else {
            return Err(format!("expected `network` line, got `{line}`"));
        };
        let activation = match *act {
            "tanh" => Activation::Tanh,
            "linear" => Activation::Linear,
            other => return Err(format!("unknown activation `{other}`")),
        };
        let n: usize = n.parse().map_err(|_| format!("bad layer count `{n}`"))?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let mut read_tensor = |kind: &str| -> std::result::Result<Matrix, String> {
                let header = lines.next().ok_or("truncated checkpoint")?;
                let h: Vec<&str> = header.split_whitespace().collect();
                let expected = format!("{name}.{i}.{kind}");
                let ["tensor", tname, r, c] = h.as_slice() else {
                    return Err(format!("expected tensor header, got `{header}`"));
                };
                if *tname != expected {
                    return Err(format!("expected tensor `{expected}`, got `{tname}`"));
                }
                let r: usize = r.parse().map_err(|_| format!("bad rows `{r}`"))?;
                let c: usize = c.parse().map_err(|_| format!("bad cols `{c}`"))?;
                let body = lines.next().ok_or("truncated checkpoint")?;
                let vals = body
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| format!("bad value `{v}`")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Matrix::from_vec(r, c, vals).map_err(|e| e.to_string())
            };
            let weight = read_tensor("weight")?;
            let bias = read_tensor("bias")?;
            if bias.shape() != (1, weight.cols()) {
                return Err(format!("bias shape mismatch in {name}.{i}"));
            }
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if prev.weight.cols() != weight.rows() {
                    return Err(format!("layer {i} of {name} does not chain"));
                }
            }
            layers.push(Layer { weight, bias });
        }
        if layers.is_empty() {
            return Err(format!("network {name} has no layers"));
        }
        nets.push((name.to_string(), Mlp { layers, activation }));
    }
    Ok(nets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    #[test]
    fn init_is_deterministic_and_sized() {
        let a = init_extractor(&[4, 8, 2], 5).unwrap();
        let b = init_extractor(&[4, 8, 2], 5).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_eq!(a.param_count(), 4 * 8 + 8 + 8 * 2 + 2);
        assert_ne!(init_extractor(&[4, 8, 2], 6).unwrap().flatten(), a.flatten());
        assert!(init_extractor(&[], 1).is_err());
        assert!(init_extractor(&[4], 1).is_err());
        assert!(init_extractor(&[4, 0, 2], 1).is_err());
    }

    #[test]
    fn init_weight_mean_within_three_sigma() {
        // fan_in 100, fan_out 100: 10k draws from U(-a, a), a = √(3/100)
        let net = init_extractor(&[100, 100], 17).unwrap();
        let w = net.layers[0].weight.as_slice();
        let a = (3.0f64 / 100.0).sqrt();
        let sigma_of_mean = (a / 3f64.sqrt()) / (w.len() as f64).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma_of_mean, "mean {mean}");
        assert!(w.iter().all(|x| x.abs() <= a));
        assert!(net.layers[0].bias.as_slice().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn encode_examples() {
        let net = init_extractor(&[3, 5, 2], 1).unwrap();
        let zero = net.with_flat(&vec![0.0; net.param_count()]).unwrap();
        assert_eq!(encode(&zero, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let ident = Mlp {
            layers: vec![Layer {
                weight: Matrix::identity(3),
                bias: Matrix::zeros(1, 3),
            }],
            activation: Activation::Linear,
        };
        assert_eq!(encode(&ident, &[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(matches!(encode(&net, &[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn encode_matches_hand_rolled_oracle() {
        let net = init_extractor(&[3, 4, 2], 9).unwrap();
        let x = [0.3, -1.2, 2.0];
        // explicit loops, independent of Mlp::forward
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut s = net.layers[0].bias[(0, j)];
            for i in 0..3 {
                s += x[i] * net.layers[0].weight[(i, j)];
            }
            h[j] = s.tanh();
        }
        let mut out = [0.0; 2];
        for j in 0..2 {
            let mut s = net.layers[1].bias[(0, j)];
            for i in 0..4 {
                s += h[i] * net.layers[1].weight[(i, j)];
            }
            out[j] = s;
        }
        let got = encode(&net, &x).unwrap();
        for (a, b) in got.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
        let batch = net
            .forward_batch(&Matrix::from_rows(&[x.to_vec(), x.to_vec()]).unwrap())
            .unwrap();
        assert_eq!(batch.row(0), got.as_slice());
    }

    #[test]
    fn discriminate_examples() {
        let zero = DiscriminatorParams::zeros(4, 3);
        assert_eq!(discriminate(&zero, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);

        let mut big = zero.clone();
        big.net.layers[1].bias[(0, 0)] = 1e4;
        let p = discriminate(&big, &[0.0; 4]).unwrap();
        assert!(p < 1.0 && p == 1.0 - PROB_EPS);
        assert!(matches!(discriminate(&zero, &[1.0]), Err(Error::InvalidArgument(_))));

        let phi = DiscriminatorParams::init(3, 5, 2).unwrap();
        let f = [0.7, -0.1, 1.3];
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut s = phi.net.layers[0].bias[(0, j)];
            for i in 0..3 {
                s += f[i] * phi.net.layers[0].weight[(i, j)];
            }
            h[j] = s.tanh();
        }
        let mut logit = phi.net.layers[1].bias[(0, 0)];
        for i in 0..5 {
            logit += h[i] * phi.net.layers[1].weight[(i, 0)];
        }
        let oracle = 1.0 / (1.0 + (-logit).exp());
        assert!((discriminate(&phi, &f).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn discriminator_of_extractor_passes_gradient_check() {
        for seed in 0..20 {
            let theta = init_extractor(&[4, 6, 3], seed).unwrap();
            let phi = DiscriminatorParams::init(3, 5, seed + 100).unwrap();
            let x = Matrix::from_rows(&[vec![0.5, -0.2, 1.0, 0.3], vec![-1.0, 0.4, 0.0, 0.9]]).unwrap();
            let objective = |flat: &[f64]| -> f64 {
                let t = theta.with_flat(flat).unwrap();
                let f = t.forward_batch(&x).unwrap();
                f.iter_rows().map(|r| discriminate(&phi, r).unwrap().ln()).sum()
            };
            let mut g = Graph::new();
            let bt = theta.bind(&mut g);
            let bp = phi.bind(&mut g);
            let xv = g.leaf(x.clone());
            let f = bt.forward(&mut g, xv).unwrap();
            let p = DiscriminatorParams::forward_graph(&bp, &mut g, f).unwrap();
            let lp = g.ln(p);
            let s = g.sum_all(lp);
            assert!((g.value(s).item() - objective(&theta.flatten())).abs() < 1e-12);
            let grads = g.backward(s).unwrap();
            let analytic = theta.grads_from(&bt, &grads).flatten();
            let numeric = finite_diff_grad(objective, &theta.flatten(), 1e-6).unwrap();
            assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = Mlp {
            layers: vec![Layer {
                weight: Matrix::scalar(1.0),
                bias: Matrix::scalar(0.0),
            }],
            activation: Activation::Linear,
        };
        let opt = OptimizerState::sgd(0.1).unwrap();
        let zero = p.with_flat(&[0.0, 0.0]).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &zero, opt).unwrap();
        assert_eq!(p, before);

        let g = p.with_flat(&[2.0, 0.0]).unwrap();
        sgd_step(&mut p, &g, opt).unwrap();
        assert!((p.layers[0].weight.item() - 0.8).abs() < 1e-15);

        let bad = p.with_flat(&[f64::NAN, 0.0]).unwrap();
        let keep = p.clone();
        assert!(matches!(sgd_step(&mut p, &bad, opt), Err(Error::Numeric(_))));
        assert_eq!(p, keep);
        assert!(OptimizerState::sgd(0.0).is_err());
    }

    #[test]
    fn sgd_on_quadratic_bowl_decays_geometrically() {
        // f(p) = ‖p‖², ∇f = 2p, so p_t = (1 − 2η)^t p_0 = 0.8^t
        let mut p = Mlp {
            layers: vec![Layer {
                weight: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
                bias: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            }],
            activation: Activation::Linear,
        };
        let opt = OptimizerState::sgd(0.1).unwrap();
        for _ in 0..100 {
            let grad = p.with_flat(&p.flatten().iter().map(|x| 2.0 * x).collect::<Vec<_>>()).unwrap();
            sgd_step(&mut p, &grad, opt).unwrap();
        }
        let norm = p.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
        let closed_form = 2.0 * 0.8f64.powi(100);
        assert!(norm < 1e-8);
        assert!((norm - closed_form).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.txt");
        let theta = init_extractor(&[5, 7, 3], 3).unwrap();
        let phi = DiscriminatorParams::init(3, 4, 4).unwrap();
        write_checkpoint(&path, &[("extractor", &theta), ("discriminator", &phi.net)]).unwrap();
        let nets = read_checkpoint(&path).unwrap();
        assert_eq!(nets.len(), 2);
        assert_eq!(nets[0].0, "extractor");
        assert_eq!(nets[0].1, theta);
        assert_eq!(nets[1].1, phi.net);

        std::fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Parse { .. })));
    }
}
