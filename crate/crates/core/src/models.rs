//! Small classifiers: a ReLU MLP and a two-stage CNN, trained with
//! softmax-cross-entropy.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, Gradients, LeafSelector, NodeId};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Fully connected ReLU network. `widths` runs from the flattened input
    /// size to the class count, e.g. `[4, 8, 2]`.
    Mlp { widths: Vec<usize> },
    /// conv(c→ch0, 3x3) → relu → pool → conv(ch0→ch1, 3x3) → relu → pool → affine → K.
    SmallCnn { channels: [usize; 2] },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub arch: Architecture,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(widths: Vec<usize>) -> Self {
        let input = widths.first().copied().unwrap_or(0);
        let classes = widths.last().copied().unwrap_or(0);
        Self {
            arch: Architecture::Mlp { widths },
            input_shape: vec![input],
            classes,
        }
    }

    /// The fixed small CNN (channels 8 then 16) over `[c, h, w]` inputs.
    pub fn small_cnn(input_shape: [usize; 3], classes: usize) -> Self {
        Self::cnn_with_channels(input_shape, [8, 16], classes)
    }

    pub fn cnn_with_channels(input_shape: [usize; 3], channels: [usize; 2], classes: usize) -> Self {
        Self {
            arch: Architecture::SmallCnn { channels },
            input_shape: input_shape.to_vec(),
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!("degenerate input shape {:?}", self.input_shape)));
        }
        match &self.arch {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::InvalidSpec(format!("bad MLP widths {widths:?}")));
                }
                if widths[0] != self.input_dim() {
                    return Err(Error::InvalidSpec(format!(
                        "first MLP width {} != input size {}",
                        widths[0],
                        self.input_dim()
                    )));
                }
                if *widths.last().unwrap() != self.classes {
                    return Err(Error::InvalidSpec(format!(
                        "final MLP width {} != class count {}",
                        widths.last().unwrap(),
                        self.classes
                    )));
                }
            }
            Architecture::SmallCnn { channels } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidSpec("small-cnn expects [channels, height, width] input".into()));
                }
                if self.input_shape[1] < 4 || self.input_shape[2] < 4 {
                    return Err(Error::InvalidSpec("small-cnn needs spatial size >= 4".into()));
                }
                if channels.contains(&0) {
                    return Err(Error::InvalidSpec("small-cnn channel count must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Parameter names, shapes and fan-in, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        match &self.arch {
            Architecture::Mlp { widths } => widths
                .windows(2)
                .enumerate()
                .flat_map(|(i, w)| {
                    [
                        (format!("w{i}"), vec![w[0], w[1]], w[0]),
                        (format!("b{i}"), vec![w[1]], w[0]),
                    ]
                })
                .collect(),
            Architecture::SmallCnn { channels: [c0, c1] } => {
                let [c, h, w] = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
                let flat = c1 * (h / 4) * (w / 4);
                vec![
                    ("conv0.w".into(), vec![*c0, c, 3, 3], c * 9),
                    ("conv0.b".into(), vec![*c0], c * 9),
                    ("conv1.w".into(), vec![*c1, *c0, 3, 3], c0 * 9),
                    ("conv1.b".into(), vec![*c1], c0 * 9),
                    ("fc.w".into(), vec![flat, self.classes], flat),
                    ("fc.b".into(), vec![self.classes], flat),
                ]
            }
        }
    }
}

/// Model parameters θ: named tensors in the order given by [`ModelSpec::param_layout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    spec: ModelSpec,
    tensors: Vec<(String, Tensor)>,
}

impl Params {
    /// Builds params from explicit tensors, checking names and shapes against `spec`.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name {
                return Err(Error::InvalidSpec(format!("expected parameter `{name}`, got `{got_name}`")));
            }
            if shape.as_slice() != t.shape() {
                return Err(Error::shape(format!("parameter `{name}`"), shape, t.shape()));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }

    /// `θ ← θ − lr · (∇θ + weight_decay · θ)`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) {
        for (name, t) in &mut self.tensors {
            let g = &grads[name.as_str()];
            for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                let step = if weight_decay != 0.0 { gv + weight_decay * *p } else { *gv };
                *p -= lr * step;
            }
        }
    }

    fn bindings<'a>(&'a self, x: &'a Tensor) -> Vec<(&'a str, &'a Tensor)> {
        let mut b: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        b.push(("x", x));
        b
    }

    fn check_batch(&self, xs: &Tensor) -> Result<usize> {
        let s = xs.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            let mut expected = vec![s.first().copied().unwrap_or(0)];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::shape("model input batch", &expected, s));
        }
        Ok(s[0])
    }

    fn check_labels(&self, n: usize, ys: &[usize]) -> Result<()> {
        if ys.len() != n {
            return Err(Error::shape("labels", &[n], &[ys.len()]));
        }
        if let Some(&label) = ys.iter().find(|&&y| y >= self.spec.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.spec.classes,
            });
        }
        Ok(())
    }

    /// Logits for a batch `xs` of shape `[n, ..input_shape]`, shape `[n, K]`.
    pub fn logits(&self, xs: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(xs)?;
        let (mut graph, _) = build_graph(&self.spec, n, None)?;
        graph.forward(&self.bindings(xs))
    }

    pub fn predict_batch(&self, xs: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(xs)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }

    /// Predicted label of a single input; ties go to the smallest class index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.predict_batch(&single(x))?[0])
    }

    /// Cross-entropy loss of a single example.
    pub fn loss(&self, x: &Tensor, y: usize) -> Result<f64> {
        Ok(self.losses(&single(x), &[y])?[0])
    }

    /// Per-example cross-entropy losses.
    pub fn losses(&self, xs: &Tensor, ys: &[usize]) -> Result<Vec<f64>> {
        Ok(self.losses_and_logits(xs, ys)?.0)
    }

    /// Per-example losses together with the `[n, K]` logits.
    pub fn losses_and_logits(&self, xs: &Tensor, ys: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let n = self.check_batch(xs)?;
        self.check_labels(n, ys)?;
        let targets = one_hot(ys, self.spec.classes);
        let (mut graph, ids) = build_graph(&self.spec, n, Some(Reduction::Sum))?;
        let mut b = self.bindings(xs);
        b.push(("targets", &targets));
        graph.forward(&b)?;
        let per = graph.value(ids.per_example.expect("loss graph")).expect("evaluated");
        let logits = graph.value(ids.logits).expect("evaluated").clone();
        Ok((per.data().to_vec(), logits))
    }

    /// Per-example losses and `∇_x` of each example's own loss.
    ///
    /// The batch loss is a sum of independent per-example terms, so its input
    /// gradient row `i` is exactly the gradient of example `i`'s loss.
    pub fn losses_and_input_grad(&self, xs: &Tensor, ys: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let n = self.check_batch(xs)?;
        self.check_labels(n, ys)?;
        let targets = one_hot(ys, self.spec.classes);
        let (mut graph, ids) = build_graph(&self.spec, n, Some(Reduction::Sum))?;
        let mut b = self.bindings(xs);
        b.push(("targets", &targets));
        graph.forward(&b)?;
        let per = graph.value(ids.per_example.expect("loss graph")).expect("evaluated").data().to_vec();
        let mut grads = graph.backward(&LeafSelector::Names(vec!["x".into()]))?;
        Ok((per, grads.remove("x").expect("x selected")))
    }

    /// Mean batch loss and its parameter gradients.
    pub fn mean_loss_and_grads(&self, xs: &Tensor, ys: &[usize]) -> Result<(f64, Gradients)> {
        let n = self.check_batch(xs)?;
        self.check_labels(n, ys)?;
        let targets = one_hot(ys, self.spec.classes);
        let (mut graph, _) = build_graph(&self.spec, n, Some(Reduction::Mean))?;
        let mut b = self.bindings(xs);
        b.push(("targets", &targets));
        let loss = graph.forward(&b)?.item();
        let grads = graph.backward(&LeafSelector::Params)?;
        Ok((loss, grads))
    }
}

/// Deterministic fan-in uniform initialisation: weights from
/// `U(-√(6/fan_in), √(6/fan_in))`, biases zero.
pub fn init(spec: &ModelSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = seeds::rng(seed);
    let tensors = spec
        .param_layout()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let is_bias = name.starts_with('b') || name.ends_with(".b");
            let data = if is_bias {
                vec![0.0; n]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            (name, Tensor::new(shape, data).expect("layout shape"))
        })
        .collect();
    Params::from_tensors(spec.clone(), tensors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelNodes {
    pub logits: NodeId,
    pub per_example: Option<NodeId>,
}

/// Builds the model graph for a batch of `n`. Leaves: `x`, every parameter,
/// and `targets` (one-hot `[n, K]`) when a loss reduction is requested.
pub fn build_graph(spec: &ModelSpec, n: usize, loss: Option<Reduction>) -> Result<(Graph, ModelNodes)> {
    let mut b = GraphBuilder::new();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    let x = b.input("x", &shape)?;
    let params: Vec<NodeId> = spec
        .param_layout()
        .iter()
        .map(|(name, shape, _)| b.param(name, shape))
        .collect::<Result<_>>()?;
    let logits = match &spec.arch {
        Architecture::Mlp { widths } => {
            let mut h = b.flatten(x);
            let layers = widths.len() - 1;
            for l in 0..layers {
                h = b.affine(h, params[2 * l], params[2 * l + 1])?;
                if l + 1 < layers {
                    h = b.relu(h);
                }
            }
            h
        }
        Architecture::SmallCnn { .. } => {
            let c0 = b.conv2d(x, params[0], params[1], 1)?;
            let r0 = b.relu(c0);
            let p0 = b.max_pool2(r0)?;
            let c1 = b.conv2d(p0, params[2], params[3], 1)?;
            let r1 = b.relu(c1);
            let p1 = b.max_pool2(r1)?;
            let f = b.flatten(p1);
            b.affine(f, params[4], params[5])?
        }
    };
    let (root, per_example) = match loss {
        None => (logits, None),
        Some(red) => {
            let t = b.input("targets", &[n, spec.classes])?;
            let per = b.softmax_xent(logits, t)?;
            let root = match red {
                Reduction::Sum => b.sum(per),
                Reduction::Mean => b.mean(per),
            };
            (root, Some(per))
        }
    };
    Ok((b.build(root), ModelNodes { logits, per_example }))
}

pub fn one_hot(ys: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; ys.len() * classes];
    for (i, &y) in ys.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![ys.len(), classes], data).expect("one-hot shape")
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn single(x: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Tensor::new(shape, x.data().to_vec()).expect("single-row batch")
}
