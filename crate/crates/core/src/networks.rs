//! The three players: classifier C, class-conditional generator G and pair
//! discriminator D, plus the exponential-moving-average teacher copy of C.
//!
//! Forward passes are expressed over a [`Graph`] so the same code serves both
//! evaluation and gradient-based training. Each player exposes its parameters
//! as a flat, deterministically ordered tensor list; `bind` inserts that list
//! as graph leaves and `forward_from` consumes the leaf ids, which lets loss
//! builders and finite-difference checks share one forward implementation.

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::rng::RngStream;
use crate::tensor::{one_hot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Plain fully connected stack; layer l maps dims[l] -> dims[l+1].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut RngStream) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let fan_in = dims[l];
            let last = l == dims.len() - 2;
            let std = if last {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            weights.push(Tensor::randn(&[dims[l], dims[l + 1]], std, rng));
            biases.push(Tensor::zeros(&[dims[l + 1]]));
        }
        Mlp { weights, biases }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            weights.push(Tensor::zeros(&[dims[l], dims[l + 1]]));
            biases.push(Tensor::zeros(&[dims[l + 1]]));
        }
        Mlp { weights, biases }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Flat parameter order: w0, b0, w1, b1, ...
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Forward through leaves[0..2*layers] with `hidden` after every layer
    /// but the last, optional `out_act` after the last, and dropout on hidden
    /// activations when `dropout > 0` in train mode.
    #[allow(clippy::too_many_arguments)]
    fn forward_from(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        x: NodeId,
        hidden: Activation,
        out_act: Option<Activation>,
        dropout: f64,
        rng: &mut RngStream,
        train: bool,
    ) -> Result<NodeId> {
        let n_layers = self.layers();
        debug_assert_eq!(leaves.len(), 2 * n_layers);
        let mut h = x;
        for l in 0..n_layers {
            h = g.affine(h, leaves[2 * l], leaves[2 * l + 1])?;
            if l + 1 < n_layers {
                h = g.activation(hidden, h);
                if dropout > 0.0 {
                    h = g.dropout(h, dropout, rng, train);
                }
            } else if let Some(act) = out_act {
                h = g.activation(act, h);
            }
        }
        Ok(h)
    }
}

fn bind_flat(g: &mut Graph, tensors: &[&Tensor], trainable: bool) -> Vec<NodeId> {
    tensors
        .iter()
        .map(|t| {
            if trainable {
                g.param((*t).clone())
            } else {
                g.constant((*t).clone())
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// MLP classifier producing K logits; softmax of the output defines
/// p_c(y | x). Train mode applies input Gaussian noise and hidden dropout.
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub mlp: Mlp,
    pub input_noise: f64,
    pub dropout: f64,
}

impl ClassifierParams {
    pub fn init(dims: &[usize], input_noise: f64, dropout: f64, rng: &mut RngStream) -> Self {
        ClassifierParams {
            mlp: Mlp::init(dims, rng),
            input_noise,
            dropout,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn flat(&self) -> Vec<&Tensor> {
        self.mlp.flat()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.flat_mut()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.mlp.layers())
            .flat_map(|l| [format!("{l}/w"), format!("{l}/b")])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        bind_flat(g, &self.flat(), trainable)
    }

    pub fn forward_from(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        x: NodeId,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        let train = mode == Mode::Train;
        let h = g.gaussian_noise(x, self.input_noise, rng, train);
        self.mlp.forward_from(
            g,
            leaves,
            h,
            Activation::LRelu,
            None,
            self.dropout,
            rng,
            train,
        )
    }

    /// Convenience forward that binds parameters as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension {
                op: "classifier_forward",
                expected: format!("[n, {}]", self.in_dim()),
                got: format!("{:?}", x.shape()),
            });
        }
        let leaves = self.bind(g, false);
        let xn = g.constant(x.clone());
        self.forward_from(g, &leaves, xn, mode, rng)
    }

    /// Eval-mode class probabilities, no gradient bookkeeping.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(crate::tensor::DType::F64);
        let mut rng = RngStream::new(0, 0); // unused in eval mode
        let logits = self.forward(&mut g, x, Mode::Eval, &mut rng)?;
        let probs = g.softmax_rows(logits)?;
        Ok(g.value(probs).clone())
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Conditional generator x = G(y, z): one-hot label concatenated with the
/// latent vector, MLP body, tanh output head.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub mlp: Mlp,
    pub num_classes: usize,
    pub latent_dim: usize,
}

impl GeneratorParams {
    pub fn init(
        num_classes: usize,
        latent_dim: usize,
        hidden: &[usize],
        data_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut dims = vec![num_classes + latent_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        GeneratorParams {
            mlp: Mlp::init(&dims, rng),
            num_classes,
            latent_dim,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn flat(&self) -> Vec<&Tensor> {
        self.mlp.flat()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.flat_mut()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.mlp.layers())
            .flat_map(|l| [format!("{l}/w"), format!("{l}/b")])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        bind_flat(g, &self.flat(), trainable)
    }

    pub fn forward_from(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        y: &[usize],
        z: &Tensor,
    ) -> Result<NodeId> {
        if z.rows() != y.len() || z.cols() != self.latent_dim {
            return Err(Error::Dimension {
                op: "generator_forward",
                expected: format!("z: [{}, {}]", y.len(), self.latent_dim),
                got: format!("{:?}", z.shape()),
            });
        }
        let onehot = one_hot(y, self.num_classes)?;
        let mut input = Vec::with_capacity(y.len() * (self.num_classes + self.latent_dim));
        for i in 0..y.len() {
            input.extend_from_slice(onehot.row(i));
            input.extend_from_slice(z.row(i));
        }
        let input = Tensor::new(vec![y.len(), self.num_classes + self.latent_dim], input)?;
        let xn = g.constant(input);
        let mut rng = RngStream::new(0, 0); // generator has no stochastic layers
        self.mlp.forward_from(
            g,
            leaves,
            xn,
            Activation::Relu,
            Some(Activation::Tanh),
            0.0,
            &mut rng,
            false,
        )
    }

    /// Deterministic samples for the given labels and latents.
    pub fn generate(&self, y: &[usize], z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(crate::tensor::DType::F64);
        let leaves = self.bind(&mut g, false);
        let out = self.forward_from(&mut g, &leaves, y, z)?;
        Ok(g.value(out).clone())
    }
}

/// i.i.d. standard-normal latent batch of shape [n, latent_dim].
pub fn sample_latent(n: usize, latent_dim: usize, rng: &mut RngStream) -> Tensor {
    Tensor::randn(&[n, latent_dim], 1.0, rng)
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscVariant {
    /// score(x, y) = psi(phi(x)) + <embed[y], phi(x)>; one trunk pass scores
    /// every label.
    Projection,
    /// trunk([x, onehot(y)]) -> psi; one trunk pass per label.
    Concat,
}

/// Pair discriminator. `trunk` maps the (possibly label-augmented) input to a
/// feature vector, `head` maps features to one logit, and `embed` holds the
/// per-class projection rows (projection variant only).
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub variant: DiscVariant,
    pub trunk: Mlp,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub embed: Option<Tensor>,
    pub num_classes: usize,
}

impl DiscriminatorParams {
    pub fn init(
        variant: DiscVariant,
        data_dim: usize,
        num_classes: usize,
        trunk_hidden: &[usize],
        rng: &mut RngStream,
    ) -> Self {
        let in_dim = match variant {
            DiscVariant::Projection => data_dim,
            DiscVariant::Concat => data_dim + num_classes,
        };
        let mut dims = vec![in_dim];
        dims.extend_from_slice(trunk_hidden);
        let feat = *trunk_hidden.last().expect("trunk needs at least one layer");
        let trunk = Mlp::init(&dims, rng);
        let head_w = Tensor::randn(&[feat, 1], (1.0 / feat as f64).sqrt(), rng);
        let head_b = Tensor::zeros(&[1]);
        let embed = match variant {
            DiscVariant::Projection => Some(Tensor::randn(
                &[num_classes, feat],
                (1.0 / feat as f64).sqrt(),
                rng,
            )),
            DiscVariant::Concat => None,
        };
        DiscriminatorParams {
            variant,
            trunk,
            head_w,
            head_b,
            embed,
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    /// Flat order: trunk (w,b pairs), head w, head b, then embed if present.
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut out = self.trunk.flat();
        out.push(&self.head_w);
        out.push(&self.head_b);
        if let Some(e) = &self.embed {
            out.push(e);
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.flat_mut();
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        if let Some(e) = &mut self.embed {
            out.push(e);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.trunk.layers())
            .flat_map(|l| [format!("trunk/{l}/w"), format!("trunk/{l}/b")])
            .collect();
        names.push("head/w".into());
        names.push("head/b".into());
        if self.embed.is_some() {
            names.push("embed".into());
        }
        names
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        bind_flat(g, &self.flat(), trainable)
    }

    /// Trunk feature pass; every entry point routes through here so the
    /// `disc_trunk_evals` counter reflects real trunk work.
    fn trunk_from(&self, g: &mut Graph, leaves: &[NodeId], input: NodeId) -> Result<NodeId> {
        g.counters.disc_trunk_evals += 1;
        let mut rng = RngStream::new(0, 0);
        let n_trunk = 2 * self.trunk.layers();
        self.trunk.forward_from(
            g,
            &leaves[..n_trunk],
            input,
            Activation::LRelu,
            Some(Activation::LRelu),
            0.0,
            &mut rng,
            false,
        )
    }

    fn head_from(&self, g: &mut Graph, leaves: &[NodeId], feat: NodeId) -> Result<NodeId> {
        let n_trunk = 2 * self.trunk.layers();
        let scores = g.affine(feat, leaves[n_trunk], leaves[n_trunk + 1])?;
        let n = g.value(scores).rows();
        g.reshape(scores, &[n])
    }

    fn validate_labels(&self, y: &[usize]) -> Result<()> {
        if let Some(&bad) = y.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Index(format!(
                "discriminator: class id {bad} out of range [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// One logit per (x, y) pair; shape [n].
    pub fn forward_from(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        x: NodeId,
        y: &[usize],
    ) -> Result<NodeId> {
        self.validate_labels(y)?;
        let n_trunk = 2 * self.trunk.layers();
        match self.variant {
            DiscVariant::Projection => {
                let feat = self.trunk_from(g, leaves, x)?;
                let psi = self.head_from(g, leaves, feat)?;
                let emb = g.embed_rows(leaves[n_trunk + 2], y)?;
                let dot = g.row_dot(emb, feat)?;
                g.add(psi, dot)
            }
            DiscVariant::Concat => {
                let onehot = one_hot(y, self.num_classes)?;
                let oh = g.constant(onehot);
                let input = g.concat_wide(x, oh)?;
                let feat = self.trunk_from(g, leaves, input)?;
                self.head_from(g, leaves, feat)
            }
        }
    }

    /// Logits for every label: shape [n, K]; column y equals
    /// `forward_from(.., y)` exactly. The projection variant runs the trunk
    /// once; the concat variant needs one trunk pass per label.
    pub fn all_labels_from(&self, g: &mut Graph, leaves: &[NodeId], x: NodeId) -> Result<NodeId> {
        let n_trunk = 2 * self.trunk.layers();
        match self.variant {
            DiscVariant::Projection => {
                let feat = self.trunk_from(g, leaves, x)?;
                let psi = self.head_from(g, leaves, feat)?;
                let proj = g.matmul_nt(feat, leaves[n_trunk + 2])?;
                g.add_col_vec(proj, psi)
            }
            DiscVariant::Concat => {
                let n = g.value(x).rows();
                let mut cols = Vec::with_capacity(self.num_classes);
                for c in 0..self.num_classes {
                    let y = vec![c; n];
                    cols.push(self.forward_from(g, leaves, x, &y)?);
                }
                g.concat_cols(&cols)
            }
        }
    }

    /// Convenience: logits for given pairs with parameters as constants.
    pub fn score_pairs(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(crate::tensor::DType::F64);
        let leaves = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let out = self.forward_from(&mut g, &leaves, xn, y)?;
        Ok(g.value(out).clone())
    }

    /// Convenience: the [n, K] all-label logit table with constant params.
    pub fn score_all_labels(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(crate::tensor::DType::F64);
        let leaves = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let out = self.all_labels_from(&mut g, &leaves, xn)?;
        Ok(g.value(out).clone())
    }
}

// ---------------------------------------------------------------------------
// EMA teacher
// ---------------------------------------------------------------------------

/// Shadow copy of the classifier updated as
/// `teacher <- decay * teacher + (1 - decay) * student`.
#[derive(Debug, Clone)]
pub struct TeacherParams {
    pub classifier: ClassifierParams,
    pub decay: f64,
}

impl TeacherParams {
    pub fn from_student(student: &ClassifierParams, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "ema decay must be in [0, 1)");
        TeacherParams {
            classifier: student.clone(),
            decay,
        }
    }

    pub fn update(&mut self, student: &ClassifierParams) -> Result<()> {
        ema_update(&mut self.classifier, student, self.decay)
    }
}

/// In-place EMA update of every teacher parameter.
pub fn ema_update(
    teacher: &mut ClassifierParams,
    student: &ClassifierParams,
    decay: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Contract(format!(
            "ema decay must be in [0, 1), got {decay}"
        )));
    }
    let svals = student.flat();
    let mut tvals = teacher.flat_mut();
    if svals.len() != tvals.len() {
        return Err(Error::Contract(
            "teacher/student parameter mismatch".into(),
        ));
    }
    for (t, s) in tvals.iter_mut().zip(svals) {
        if !t.same_shape(s) {
            return Err(Error::Dimension {
                op: "ema_update",
                expected: format!("{:?}", t.shape()),
                got: format!("{:?}", s.shape()),
            });
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// All trainable state of the three-player game. `dtype` selects the
/// training-path precision: f32 rounds every op output and stored parameter
/// to f32; evaluation and gradient checking always run in f64.
#[derive(Debug, Clone)]
pub struct TripleGanModel {
    pub classifier: ClassifierParams,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub teacher: TeacherParams,
    pub dtype: crate::tensor::DType,
}

impl TripleGanModel {
    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn data_dim(&self) -> usize {
        self.classifier.in_dim()
    }
}
