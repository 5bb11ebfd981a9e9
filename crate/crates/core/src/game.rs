//! Loss assembly and the alternating training loop of the three-player game.
//!
//! Per step, in order: one optimizer update of the discriminator against real
//! pairs, classifier pairs and generator pairs; one update of the classifier
//! (marginalized adversarial term, supervised cross-entropy, the optional
//! pseudo-discriminative term and the optional unlabeled-data regularizer);
//! one update of the generator; one EMA teacher update. Gradients never cross
//! player boundaries: each loss binds only its own player's parameters as
//! trainable leaves, everything else enters as constants.

use crate::adam::{AdamConfig, AdamState};
use crate::data::{Batcher, Dataset, SemiSplit};
use crate::error::{Error, Result};
use crate::graph::{softplus, Graph, NodeId};
use crate::networks::{
    ema_update, sample_latent, ClassifierParams, Mode, TripleGanModel,
};
use crate::rng::{derive_seed, streams, RngStream};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Schedules and hyperparameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    SigmoidRampup,
}

/// Coefficient schedule: zero before `start`, then a sigmoid-shaped ramp
/// exp(-5 (1-x)^2) over `rampup` iterations, then `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub max: f64,
    pub rampup: u64,
    pub start: u64,
}

impl Schedule {
    pub fn constant(max: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            max,
            rampup: 0,
            start: 0,
        }
    }

    pub fn rampup(max: f64, rampup: u64, start: u64) -> Self {
        Schedule {
            kind: ScheduleKind::SigmoidRampup,
            max,
            rampup,
            start,
        }
    }

    pub fn value(&self, iter: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.max,
            ScheduleKind::SigmoidRampup => {
                if iter < self.start {
                    return 0.0;
                }
                if self.rampup == 0 {
                    return self.max;
                }
                let progress = ((iter - self.start) as f64 / self.rampup as f64).min(1.0);
                self.max * (-5.0 * (1.0 - progress) * (1.0 - progress)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    None,
    Entropy,
    Consistency,
    MeanTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenLossVariant {
    /// (1 - alpha) * mean log(1 - D(G(y,z), y)), the game's own objective.
    Minimax,
    /// -(1 - alpha) * mean log D(G(y,z), y).
    NonSaturating,
}

#[derive(Debug, Clone)]
pub struct GameHyperparams {
    pub alpha: f64,
    pub alpha_p: Schedule,
    pub alpha_u: Schedule,
    pub m_d: usize,
    pub m_c: usize,
    pub m_g: usize,
    pub regularizer: RegularizerKind,
    pub ema_decay: f64,
    pub gen_loss: GenLossVariant,
    /// Fraction of the positive batch replaced... augmented with
    /// classifier-labeled unlabeled pairs.
    pub rho: f64,
    pub total_iters: u64,
    pub pretrain_iters: u64,
}

impl GameHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Contract(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.alpha_p.max < 0.0 || self.alpha_u.max < 0.0 {
            return Err(Error::Contract("schedule maxima must be >= 0".into()));
        }
        if self.m_d == 0 || self.m_c == 0 || self.m_g == 0 {
            return Err(Error::Contract("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Contract(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Contract(format!(
                "ema decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.pretrain_iters > self.total_iters {
            return Err(Error::Contract(
                "pretrain iterations exceed total iterations".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batches and loss builders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn concat(&self, other: &PairBatch) -> Result<PairBatch> {
        if other.is_empty() {
            return Ok(self.clone());
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(other.x.data());
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Ok(PairBatch {
            x: Tensor::new(vec![self.len() + other.len(), self.x.cols()], data)?,
            y,
        })
    }
}

/// log(1 - D(x, y)) for every label, computed with frozen discriminator
/// weights: the constant table the classifier's adversarial term needs.
pub fn log_one_minus_d_all_labels(model: &TripleGanModel, x: &Tensor) -> Result<Tensor> {
    let logits = model.discriminator.score_all_labels(x)?;
    let data = logits.data().iter().map(|&l| -softplus(l)).collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Discriminator loss node: the negation of the game's D objective so that
/// descent on this node is ascent on the objective. `leaves` are the
/// discriminator's parameters (positives, classifier pairs and generator
/// pairs all enter as data).
pub fn disc_loss_node(
    g: &mut Graph,
    model: &TripleGanModel,
    leaves: &[NodeId],
    positives: &PairBatch,
    cls_pairs: &PairBatch,
    gen_pairs: &PairBatch,
    alpha: f64,
) -> Result<NodeId> {
    for (b, name) in [
        (positives, "positives"),
        (cls_pairs, "classifier pairs"),
        (gen_pairs, "generator pairs"),
    ] {
        if b.is_empty() {
            return Err(Error::EmptyBatch(match name {
                "positives" => "discriminator positives",
                "classifier pairs" => "discriminator classifier pairs",
                _ => "discriminator generator pairs",
            }));
        }
    }
    let d = &model.discriminator;

    let xp = g.constant(positives.x.clone());
    let lp = d.forward_from(g, leaves, xp, &positives.y)?;
    let real_term = g.bce_logit(lp, &Tensor::full(&[positives.len()], 1.0))?;

    let xc = g.constant(cls_pairs.x.clone());
    let lc = d.forward_from(g, leaves, xc, &cls_pairs.y)?;
    let cls_term = g.bce_logit(lc, &Tensor::zeros(&[cls_pairs.len()]))?;

    let xg = g.constant(gen_pairs.x.clone());
    let lg = d.forward_from(g, leaves, xg, &gen_pairs.y)?;
    let gen_term = g.bce_logit(lg, &Tensor::zeros(&[gen_pairs.len()]))?;

    let cls_scaled = g.scale(cls_term, alpha);
    let gen_scaled = g.scale(gen_term, 1.0 - alpha);
    let partial = g.add(cls_scaled, gen_scaled)?;
    g.add(real_term, partial)
}

/// One discriminator update's loss value and parameter gradients.
pub fn discriminator_loss(
    model: &TripleGanModel,
    positives: &PairBatch,
    cls_pairs: &PairBatch,
    gen_pairs: &PairBatch,
    alpha: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(model.dtype);
    let leaves = model.discriminator.bind(&mut g, true);
    let loss = disc_loss_node(
        &mut g, model, &leaves, positives, cls_pairs, gen_pairs, alpha,
    )?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "discriminator loss is not finite: {value}"
        )));
    }
    let grads = g.backward(loss)?;
    let out = leaves
        .iter()
        .zip(model.discriminator.flat())
        .map(|(&id, p)| grads.for_leaf(id, p.shape()))
        .collect();
    Ok((value, out))
}

/// Weights and gating for one classifier update.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierLossWeights {
    pub alpha: f64,
    pub alpha_p_eff: f64,
    pub alpha_u_eff: f64,
    /// False during classifier pretraining (no adversarial term).
    pub include_adv: bool,
    pub regularizer: RegularizerKind,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClassifierLossParts {
    pub total: f64,
    pub adv: f64,
    pub r_c: f64,
    pub r_p: f64,
    pub r_u: f64,
}

pub struct ClassifierBatches<'a> {
    /// Unlabeled inputs x_c for the adversarial term and the regularizer.
    /// May be empty when neither is active.
    pub unlabeled_x: &'a Tensor,
    /// Labeled pairs (x_d, y_d) for the supervised cross-entropy.
    pub labeled: &'a PairBatch,
    /// Generated pairs (x_g, y_g) for the pseudo-discriminative term.
    pub generated: Option<&'a PairBatch>,
}

pub struct ClassifierLossNodes {
    pub total: NodeId,
    pub parts: ClassifierLossParts,
}

/// Builds the classifier loss subgraph over bound classifier leaves.
///
/// The adversarial term marginalizes the label exactly:
/// (alpha/n) sum_i sum_y p_c(y|x_i) log(1 - D(x_i, y)), with the
/// discriminator table precomputed outside the graph (no gradient reaches
/// the discriminator, and one trunk pass per batch suffices with the
/// projection variant). The teacher enters as constants.
pub fn classifier_loss_nodes(
    g: &mut Graph,
    model: &TripleGanModel,
    leaves: &[NodeId],
    batches: &ClassifierBatches,
    weights: &ClassifierLossWeights,
    rng: &mut RngStream,
) -> Result<ClassifierLossNodes> {
    let c = &model.classifier;
    if batches.labeled.is_empty() {
        return Err(Error::EmptyBatch("classifier labeled batch"));
    }
    let k = c.num_classes();
    if model.discriminator.num_classes != k {
        return Err(Error::Contract(format!(
            "classifier has {k} classes but discriminator has {}",
            model.discriminator.num_classes
        )));
    }

    let mut total: Option<NodeId> = None;
    let mut add_term = |g: &mut Graph, node: NodeId, weight: f64| -> Result<NodeId> {
        let scaled = if weight == 1.0 { node } else { g.scale(node, weight) };
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
        Ok(scaled)
    };

    let mut parts = ClassifierLossParts::default();
    // the unlabeled stochastic pass, shared between the adversarial term and
    // the regularizer when both are active
    let mut unlabeled_pass: Option<(NodeId, NodeId)> = None; // (logits, probs)

    // adversarial term over all labels
    if weights.include_adv {
        if batches.unlabeled_x.rows() == 0 {
            return Err(Error::EmptyBatch("classifier adversarial batch"));
        }
        let n = batches.unlabeled_x.rows();
        let log1md = log_one_minus_d_all_labels(model, batches.unlabeled_x)?;
        let xc = g.constant(batches.unlabeled_x.clone());
        let logits = c.forward_from(g, leaves, xc, Mode::Train, rng)?;
        let probs = g.softmax_rows(logits)?;
        unlabeled_pass = Some((logits, probs));
        let l_const = g.constant(log1md);
        let weighted = g.mul_elem(probs, l_const)?;
        let sum = g.sum_all(weighted);
        let adv = g.scale(sum, weights.alpha / n as f64);
        add_term(g, adv, 1.0)?;
        parts.adv = g.value(adv).item();
    }

    // supervised cross-entropy on labeled data
    {
        let xd = g.constant(batches.labeled.x.clone());
        let logits = c.forward_from(g, leaves, xd, Mode::Train, rng)?;
        let r_c = g.cross_entropy(logits, &batches.labeled.y)?;
        add_term(g, r_c, 1.0)?;
        parts.r_c = g.value(r_c).item();
    }

    // pseudo-discriminative term on generated pairs
    if weights.alpha_p_eff > 0.0 {
        let gen = batches.generated.ok_or(Error::EmptyBatch(
            "classifier generated batch (alpha_p is active)",
        ))?;
        if gen.is_empty() {
            return Err(Error::EmptyBatch("classifier generated batch"));
        }
        let xg = g.constant(gen.x.clone());
        let logits = c.forward_from(g, leaves, xg, Mode::Train, rng)?;
        let r_p = g.cross_entropy(logits, &gen.y)?;
        add_term(g, r_p, weights.alpha_p_eff)?;
        parts.r_p = g.value(r_p).item();
    }

    // unlabeled-data regularizer
    if weights.alpha_u_eff > 0.0
        && weights.regularizer != RegularizerKind::None
        && batches.unlabeled_x.rows() > 0
    {
        let n = batches.unlabeled_x.rows();
        let (student_logits, student_probs) = match unlabeled_pass {
            Some(pair) => pair,
            None => {
                let xc = g.constant(batches.unlabeled_x.clone());
                let logits = c.forward_from(g, leaves, xc, Mode::Train, rng)?;
                let probs = g.softmax_rows(logits)?;
                (logits, probs)
            }
        };
        let r_u = match weights.regularizer {
            RegularizerKind::Entropy => g.entropy_rows(student_logits)?,
            RegularizerKind::Consistency => {
                let xc = g.constant(batches.unlabeled_x.clone());
                let logits2 = c.forward_from(g, leaves, xc, Mode::Train, rng)?;
                let probs2 = g.softmax_rows(logits2)?;
                squared_l2_rows_mean(g, student_probs, probs2, n)?
            }
            RegularizerKind::MeanTeacher => {
                let t = &model.teacher.classifier;
                let t_leaves = t.bind(g, false);
                let xc = g.constant(batches.unlabeled_x.clone());
                let t_logits = t.forward_from(g, &t_leaves, xc, Mode::Train, rng)?;
                let t_probs = g.softmax_rows(t_logits)?;
                squared_l2_rows_mean(g, student_probs, t_probs, n)?
            }
            RegularizerKind::None => unreachable!(),
        };
        add_term(g, r_u, weights.alpha_u_eff)?;
        parts.r_u = g.value(r_u).item();
    }

    let total = total.expect("classifier loss has at least the supervised term");
    parts.total = g.value(total).item();
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "classifier loss is not finite: {}",
            parts.total
        )));
    }
    Ok(ClassifierLossNodes { total, parts })
}

/// Mean over rows of the squared l2 distance between probability rows.
fn squared_l2_rows_mean(g: &mut Graph, a: NodeId, b: NodeId, n: usize) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let sq = g.mul_elem(diff, diff)?;
    let sum = g.sum_all(sq);
    Ok(g.scale(sum, 1.0 / n as f64))
}

/// One classifier update's loss parts and parameter gradients.
pub fn classifier_loss(
    model: &TripleGanModel,
    batches: &ClassifierBatches,
    weights: &ClassifierLossWeights,
    rng: &mut RngStream,
) -> Result<(ClassifierLossParts, Vec<Tensor>)> {
    let mut g = Graph::new(model.dtype);
    let leaves = model.classifier.bind(&mut g, true);
    let nodes = classifier_loss_nodes(&mut g, model, &leaves, batches, weights, rng)?;
    let grads = g.backward(nodes.total)?;
    let out = leaves
        .iter()
        .zip(model.classifier.flat())
        .map(|(&id, p)| grads.for_leaf(id, p.shape()))
        .collect();
    Ok((nodes.parts, out))
}

/// Generator loss node over bound generator leaves; discriminator weights are
/// constants so the gradient flows only into the generator.
pub fn gen_loss_node(
    g: &mut Graph,
    model: &TripleGanModel,
    leaves: &[NodeId],
    y: &[usize],
    z: &Tensor,
    alpha: f64,
    variant: GenLossVariant,
) -> Result<NodeId> {
    if y.is_empty() {
        return Err(Error::EmptyBatch("generator batch"));
    }
    let x_fake = model.generator.forward_from(g, leaves, y, z)?;
    let d_leaves = model.discriminator.bind(g, false);
    let logits = model.discriminator.forward_from(g, &d_leaves, x_fake, y)?;
    match variant {
        GenLossVariant::Minimax => {
            // (1-alpha) * mean log(1 - D) = -(1-alpha) * bce(logits, 0)
            let bce0 = g.bce_logit(logits, &Tensor::zeros(&[y.len()]))?;
            Ok(g.scale(bce0, -(1.0 - alpha)))
        }
        GenLossVariant::NonSaturating => {
            // -(1-alpha) * mean log D = (1-alpha) * bce(logits, 1)
            let bce1 = g.bce_logit(logits, &Tensor::full(&[y.len()], 1.0))?;
            Ok(g.scale(bce1, 1.0 - alpha))
        }
    }
}

/// One generator update's loss value and parameter gradients.
pub fn generator_loss(
    model: &TripleGanModel,
    y: &[usize],
    z: &Tensor,
    alpha: f64,
    variant: GenLossVariant,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(model.dtype);
    let leaves = model.generator.bind(&mut g, true);
    let loss = gen_loss_node(&mut g, model, &leaves, y, z, alpha, variant)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "generator loss is not finite: {value}"
        )));
    }
    let grads = g.backward(loss)?;
    let out = leaves
        .iter()
        .zip(model.generator.flat())
        .map(|(&id, p)| grads.for_leaf(id, p.shape()))
        .collect();
    Ok((value, out))
}

/// Sample labels from the classifier's (or teacher's) predictive
/// distribution, one categorical draw per row.
pub fn sample_predictive_labels(
    classifier: &ClassifierParams,
    x: &Tensor,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    let probs = classifier.predict_probs(x)?;
    Ok((0..probs.rows())
        .map(|i| rng.categorical(probs.row(i)))
        .collect())
}

/// Label a rho-fraction of the given unlabeled batch with classifier-sampled
/// pseudo labels, producing extra positive pairs for the discriminator. The
/// teacher does the labeling when `use_teacher` is set.
pub fn pseudo_pair_augment(
    model: &TripleGanModel,
    x: &Tensor,
    rho: f64,
    use_teacher: bool,
    rng: &mut RngStream,
) -> Result<PairBatch> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Contract(format!("rho must be in [0, 1], got {rho}")));
    }
    let take = (rho * x.rows() as f64).floor() as usize;
    if take == 0 {
        return Ok(PairBatch {
            x: Tensor::zeros(&[1, x.cols()]),
            y: vec![],
        });
    }
    let sub = x.gather_rows(&(0..take).collect::<Vec<_>>());
    let labeler = if use_teacher {
        &model.teacher.classifier
    } else {
        &model.classifier
    };
    let y = sample_predictive_labels(labeler, &sub, rng)?;
    Ok(PairBatch { x: sub, y })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Loss values and effective schedule weights for one completed step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepMetrics {
    pub loss_d: f64,
    pub loss_g: f64,
    pub c_parts: ClassifierLossParts,
    pub alpha_p_eff: f64,
    pub alpha_u_eff: f64,
}

/// Owns the model, optimizer states, batch streams and step counter.
pub struct Trainer {
    pub model: TripleGanModel,
    pub hp: GameHyperparams,
    pub adam_c: AdamState,
    pub adam_d: AdamState,
    pub adam_g: AdamState,
    pub iter: u64,
    pub base_seed: u64,
    train: Dataset,
    split: SemiSplit,
    labeled_batcher: Batcher,
    adv_batcher: Batcher,
    pseudo_batcher: Option<Batcher>,
}

/// Per-player optimizer settings.
#[derive(Debug, Clone, Copy)]
pub struct OptimSettings {
    pub classifier: AdamConfig,
    pub discriminator: AdamConfig,
    pub generator: AdamConfig,
}

impl Trainer {
    pub fn new(
        model: TripleGanModel,
        hp: GameHyperparams,
        optim: OptimSettings,
        train: Dataset,
        split: SemiSplit,
        base_seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        if split.labeled.is_empty() {
            return Err(Error::Contract("training needs labeled data".into()));
        }
        let semi = !split.unlabeled.is_empty();
        // the adversarial x_c pool: unlabeled data, or the labeled inputs
        // when no unlabeled pool exists
        let adv_indices = if semi {
            split.unlabeled.clone()
        } else {
            split.labeled.clone()
        };
        let labeled_batcher = Batcher::new(
            split.labeled.clone(),
            hp.m_d,
            derive_seed(base_seed, 101),
            true,
        )?;
        let adv_batcher = Batcher::new(adv_indices, hp.m_c, derive_seed(base_seed, 102), true)?;
        let pseudo_batcher = if semi && hp.rho > 0.0 {
            Some(Batcher::new(
                split.unlabeled.clone(),
                hp.m_d,
                derive_seed(base_seed, 103),
                true,
            )?)
        } else {
            None
        };
        let adam_c = AdamState::new(optim.classifier, &model.classifier.flat());
        let adam_d = AdamState::new(optim.discriminator, &model.discriminator.flat());
        let adam_g = AdamState::new(optim.generator, &model.generator.flat());
        Ok(Trainer {
            model,
            hp,
            adam_c,
            adam_d,
            adam_g,
            iter: 0,
            base_seed,
            train,
            split,
            labeled_batcher,
            adv_batcher,
            pseudo_batcher,
        })
    }

    pub fn semi_supervised(&self) -> bool {
        !self.split.unlabeled.is_empty()
    }

    pub fn split(&self) -> &SemiSplit {
        &self.split
    }

    pub fn train_data(&self) -> &Dataset {
        &self.train
    }

    fn stream(&self, id: u64) -> RngStream {
        RngStream::new(self.base_seed, id).substream(self.iter)
    }

    fn pair_batch(&self, idx: &[usize]) -> PairBatch {
        PairBatch {
            x: self.train.features.gather_rows(idx),
            y: idx.iter().map(|&i| self.train.labels[i]).collect(),
        }
    }

    /// In the pretraining phase the classifier trains alone on R_C plus the
    /// ramped unlabeled regularizer; afterwards every step updates D, C and G
    /// in that order. The teacher EMA tracks the classifier in both phases.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let iter = self.iter;
        let pretrain = iter < self.hp.pretrain_iters;
        let semi = self.semi_supervised();
        let use_teacher = self.hp.regularizer == RegularizerKind::MeanTeacher;

        // consume every stream each step so the batch cursors stay a pure
        // function of the iteration counter
        let labeled_idx = self.labeled_batcher.next().expect("cycling batcher");
        let adv_idx = self.adv_batcher.next().expect("cycling batcher");
        let pseudo_idx = self.pseudo_batcher.as_mut().map(|b| b.next().expect("cycling"));

        let labeled = self.pair_batch(&labeled_idx);
        let unlabeled_x = self.train.features.gather_rows(&adv_idx);

        let alpha_u_eff = if semi && self.hp.regularizer != RegularizerKind::None {
            self.hp.alpha_u.value(iter)
        } else {
            0.0
        };
        let alpha_p_eff = if pretrain { 0.0 } else { self.hp.alpha_p.value(iter) };

        let mut metrics = StepMetrics {
            alpha_p_eff,
            alpha_u_eff,
            ..Default::default()
        };

        if pretrain {
            let weights = ClassifierLossWeights {
                alpha: self.hp.alpha,
                alpha_p_eff: 0.0,
                alpha_u_eff,
                include_adv: false,
                regularizer: self.hp.regularizer,
            };
            let batches = ClassifierBatches {
                unlabeled_x: &unlabeled_x,
                labeled: &labeled,
                generated: None,
            };
            let mut rng = self.stream(streams::INPUT_NOISE);
            let (parts, grads) = classifier_loss(&self.model, &batches, &weights, &mut rng)?;
            let mut params = self.model.classifier.flat_mut();
            self.adam_c.step(&mut params, &grads)?;
            metrics.c_parts = parts;
        } else {
            // --- discriminator update ---
            let mut pseudo_rng = self.stream(streams::PSEUDO_LABEL);
            let positives = match pseudo_idx {
                Some(idx) if semi && self.hp.rho > 0.0 => {
                    let pool = self.train.features.gather_rows(&idx);
                    let pseudo = pseudo_pair_augment(
                        &self.model,
                        &pool,
                        self.hp.rho,
                        use_teacher,
                        &mut pseudo_rng,
                    )?;
                    labeled.concat(&pseudo)?
                }
                _ => labeled.clone(),
            };

            // classifier pairs (x_c, y_c ~ p_c(y|x_c)), sampled not argmaxed
            let y_c = {
                let labeler = if use_teacher {
                    &self.model.teacher.classifier
                } else {
                    &self.model.classifier
                };
                sample_predictive_labels(labeler, &unlabeled_x, &mut pseudo_rng)?
            };
            let cls_pairs = PairBatch {
                x: unlabeled_x.clone(),
                y: y_c,
            };

            // generator pairs (x_g, y_g): y ~ p(y), z ~ p_z, x = G(y, z)
            let mut prior_rng = self.stream(streams::CLASS_PRIOR);
            let mut latent_rng = self.stream(streams::LATENT);
            let y_g = crate::data::class_prior_sample(
                self.model.num_classes(),
                self.hp.m_g,
                &mut prior_rng,
            );
            let z_d = sample_latent(self.hp.m_g, self.model.generator.latent_dim, &mut latent_rng);
            let x_g = self.model.generator.generate(&y_g, &z_d)?;
            let gen_pairs = PairBatch { x: x_g, y: y_g };

            let (loss_d, grads_d) = discriminator_loss(
                &self.model,
                &positives,
                &cls_pairs,
                &gen_pairs,
                self.hp.alpha,
            )?;
            {
                let mut params = self.model.discriminator.flat_mut();
                self.adam_d.step(&mut params, &grads_d)?;
            }
            metrics.loss_d = loss_d;

            // --- classifier update (marginalized adversarial term) ---
            let generated = if alpha_p_eff > 0.0 {
                // fresh pairs from the prior for the pseudo-discriminative
                // term, independent of the D update's pairs
                let y_p = crate::data::class_prior_sample(
                    self.model.num_classes(),
                    self.hp.m_g,
                    &mut prior_rng,
                );
                let z_p =
                    sample_latent(self.hp.m_g, self.model.generator.latent_dim, &mut latent_rng);
                let x_p = self.model.generator.generate(&y_p, &z_p)?;
                Some(PairBatch { x: x_p, y: y_p })
            } else {
                None
            };
            let weights = ClassifierLossWeights {
                alpha: self.hp.alpha,
                alpha_p_eff,
                alpha_u_eff,
                include_adv: true,
                regularizer: self.hp.regularizer,
            };
            let batches = ClassifierBatches {
                unlabeled_x: &unlabeled_x,
                labeled: &labeled,
                generated: generated.as_ref(),
            };
            let mut c_rng = self.stream(streams::INPUT_NOISE);
            let (parts, grads_c) =
                classifier_loss(&self.model, &batches, &weights, &mut c_rng)?;
            {
                let mut params = self.model.classifier.flat_mut();
                self.adam_c.step(&mut params, &grads_c)?;
            }
            metrics.c_parts = parts;

            // --- generator update ---
            let y_gen = crate::data::class_prior_sample(
                self.model.num_classes(),
                self.hp.m_g,
                &mut prior_rng,
            );
            let z_gen =
                sample_latent(self.hp.m_g, self.model.generator.latent_dim, &mut latent_rng);
            let (loss_g, grads_g) = generator_loss(
                &self.model,
                &y_gen,
                &z_gen,
                self.hp.alpha,
                self.hp.gen_loss,
            )?;
            {
                let mut params = self.model.generator.flat_mut();
                self.adam_g.step(&mut params, &grads_g)?;
            }
            metrics.loss_g = loss_g;
        }

        // EMA teacher tracks the student in both phases
        let decay = self.hp.ema_decay;
        ema_update(&mut self.model.teacher.classifier, &self.model.classifier, decay)?;

        self.iter += 1;
        Ok(metrics)
    }

    /// Restore the batch cursors after loading a checkpoint; they are a pure
    /// function of the iteration counter.
    pub fn seek_to_iter(&mut self, iter: u64) {
        self.iter = iter;
        self.labeled_batcher.seek(iter);
        self.adv_batcher.seek(iter);
        if let Some(b) = &mut self.pseudo_batcher {
            b.seek(iter);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_mixture, split_semi, SplitTag};
    use crate::networks::{
        DiscVariant, DiscriminatorParams, GeneratorParams, TeacherParams,
    };

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn test_model(seed: u64, k: usize, zero_weights: bool) -> TripleGanModel {
        let mut rng = RngStream::new(seed, streams::INIT);
        let d = 2;
        let mut classifier = ClassifierParams::init(&[d, 16, 16, k], 0.1, 0.5, &mut rng);
        let mut generator = GeneratorParams::init(k, 4, &[16, 16], d, &mut rng);
        let mut discriminator =
            DiscriminatorParams::init(DiscVariant::Projection, d, k, &[16, 8], &mut rng);
        if zero_weights {
            for t in classifier.flat_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            for t in generator.flat_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            for t in discriminator.flat_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let teacher = TeacherParams::from_student(&classifier, 0.99);
        TripleGanModel {
            classifier,
            generator,
            discriminator,
            teacher,
            dtype: crate::tensor::DType::F64,
        }
    }

    fn tiny_batches(seed: u64, k: usize, n: usize) -> (PairBatch, PairBatch, PairBatch) {
        let mut rng = RngStream::new(seed, streams::DATA_GEN);
        let mk = |rng: &mut RngStream| PairBatch {
            x: Tensor::randn(&[n, 2], 0.5, rng),
            y: (0..n).map(|i| i % k).collect(),
        };
        (mk(&mut rng), mk(&mut rng), mk(&mut rng))
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::rampup(2.0, 100, 50);
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(49), 0.0);
        // x = 0 at the rampup start: max * e^{-5}
        assert!(close(s.value(50), 2.0 * (-5.0f64).exp(), 1e-12));
        assert!(close(s.value(50), 2.0 * 0.006737946999085467, 1e-12));
        // x = 1 at the end of the ramp and beyond: max
        assert!(close(s.value(150), 2.0, 1e-15));
        assert!(close(s.value(1000), 2.0, 1e-15));
        // nondecreasing along the ramp
        let mut prev = 0.0;
        for it in 50..=150 {
            let v = s.value(it);
            assert!(v >= prev);
            prev = v;
        }
        let c = Schedule::constant(0.3);
        assert_eq!(c.value(0), 0.3);
        assert_eq!(c.value(10_000), 0.3);
    }

    #[test]
    fn disc_loss_at_zero_weights_is_two_ln2() {
        let k = 4;
        let model = test_model(1, k, true);
        let (pos, cls, gen) = tiny_batches(2, k, 3);
        for alpha in [0.3, 0.5, 0.7] {
            let (v, grads) = discriminator_loss(&model, &pos, &cls, &gen, alpha).unwrap();
            assert!(close(v, 2.0 * 2.0f64.ln(), 1e-12), "alpha {alpha}: {v}");
            assert_eq!(grads.len(), model.discriminator.flat().len());
        }
    }

    #[test]
    fn disc_loss_matches_manual_bce_combination() {
        let k = 3;
        let model = test_model(3, k, false);
        let (pos, cls, gen) = tiny_batches(4, k, 1);
        let alpha = 0.5;
        let (v, _) = discriminator_loss(&model, &pos, &cls, &gen, alpha).unwrap();

        let bce = |logit: f64, target: f64| -> f64 {
            logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
        };
        let lp = model.discriminator.score_pairs(&pos.x, &pos.y).unwrap().data()[0];
        let lc = model.discriminator.score_pairs(&cls.x, &cls.y).unwrap().data()[0];
        let lg = model.discriminator.score_pairs(&gen.x, &gen.y).unwrap().data()[0];
        let manual = bce(lp, 1.0) + alpha * bce(lc, 0.0) + (1.0 - alpha) * bce(lg, 0.0);
        assert!(close(v, manual, 1e-12), "{v} vs {manual}");
    }

    #[test]
    fn saturated_disc_loss_is_near_zero() {
        // a discriminator that scores +50 on real and -50 on fakes
        let k = 3;
        let model = test_model(5, k, false);
        let mut g = Graph::new(crate::tensor::DType::F64);
        let l_real = g.constant(Tensor::full(&[4], 50.0));
        let real = g.bce_logit(l_real, &Tensor::full(&[4], 1.0)).unwrap();
        let l_fake = g.constant(Tensor::full(&[4], -50.0));
        let fake = g.bce_logit(l_fake, &Tensor::zeros(&[4])).unwrap();
        let v = g.value(real).item() + g.value(fake).item();
        assert!(v < 1e-20);
        let _ = model;
    }

    #[test]
    fn classifier_adv_gradient_vanishes_for_label_constant_d() {
        // when D(x, y) does not depend on y the marginalized adversarial term
        // has zero classifier gradient (probabilities sum to one)
        let k = 4;
        let mut model = test_model(6, k, false);
        // zero the label embedding: projection score loses its y dependence
        if let Some(e) = &mut model.discriminator.embed {
            for v in e.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = RngStream::new(7, streams::DATA_GEN);
        let x = Tensor::randn(&[5, 2], 0.5, &mut rng);
        let labeled = PairBatch {
            x: Tensor::randn(&[2, 2], 0.5, &mut rng),
            y: vec![0, 1],
        };
        let weights = ClassifierLossWeights {
            alpha: 0.5,
            alpha_p_eff: 0.0,
            alpha_u_eff: 0.0,
            include_adv: true,
            regularizer: RegularizerKind::None,
        };
        // gradients of the adversarial term alone: compare loss with alpha
        // against supervised-only; the difference in gradients must vanish
        let batches = ClassifierBatches {
            unlabeled_x: &x,
            labeled: &labeled,
            generated: None,
        };
        let mut r1 = RngStream::new(9, streams::INPUT_NOISE);
        let (_, grads_full) = classifier_loss(&model, &batches, &weights, &mut r1).unwrap();
        let sup_only = ClassifierLossWeights {
            include_adv: false,
            ..weights
        };
        let mut r2 = RngStream::new(9, streams::INPUT_NOISE);
        // same rng seed, but the adv pass consumes draws; rebuild with the
        // adversarial pass included yet a D table forced constant instead:
        // easier check: the adv-only gradient is the difference
        let (_, grads_sup) = classifier_loss(&model, &batches, &sup_only, &mut r2).unwrap();
        // the supervised pass in the full loss saw different dropout draws, so
        // compare through a dropout-free model instead
        let _ = (grads_full, grads_sup);

        let mut clean = model.clone();
        clean.classifier.dropout = 0.0;
        clean.classifier.input_noise = 0.0;
        let mut r3 = RngStream::new(9, streams::INPUT_NOISE);
        let (_, gf) = classifier_loss(&clean, &batches, &weights, &mut r3).unwrap();
        let mut r4 = RngStream::new(9, streams::INPUT_NOISE);
        let (_, gs) = classifier_loss(&clean, &batches, &sup_only, &mut r4).unwrap();
        for (a, b) in gf.iter().zip(&gs) {
            assert!(a.linf_diff(b) < 1e-12, "adv gradient leaked");
        }
    }

    #[test]
    fn classifier_loss_part_gating() {
        let k = 4;
        let mut model = test_model(8, k, false);
        model.classifier.dropout = 0.0;
        model.classifier.input_noise = 0.0;
        let mut rng = RngStream::new(9, streams::DATA_GEN);
        let x = Tensor::randn(&[4, 2], 0.5, &mut rng);
        let labeled = PairBatch {
            x: Tensor::randn(&[3, 2], 0.5, &mut rng),
            y: vec![0, 1, 2],
        };
        let weights = ClassifierLossWeights {
            alpha: 0.5,
            alpha_p_eff: 0.0,
            alpha_u_eff: 0.0,
            include_adv: true,
            regularizer: RegularizerKind::None,
        };
        let batches = ClassifierBatches {
            unlabeled_x: &x,
            labeled: &labeled,
            generated: None,
        };
        let mut r = RngStream::new(10, streams::INPUT_NOISE);
        let (parts, _) = classifier_loss(&model, &batches, &weights, &mut r).unwrap();
        assert!(close(parts.total, parts.adv + parts.r_c, 1e-12));
        assert_eq!(parts.r_p, 0.0);
        assert_eq!(parts.r_u, 0.0);
    }

    #[test]
    fn classifier_parts_match_direct_formula_on_two_samples() {
        let k = 3;
        let mut model = test_model(11, k, false);
        model.classifier.dropout = 0.0;
        model.classifier.input_noise = 0.0;
        let mut rng = RngStream::new(12, streams::DATA_GEN);
        let x = Tensor::randn(&[2, 2], 0.5, &mut rng);
        let labeled = PairBatch {
            x: Tensor::randn(&[2, 2], 0.5, &mut rng),
            y: vec![0, 2],
        };
        let gen = PairBatch {
            x: Tensor::randn(&[2, 2], 0.5, &mut rng),
            y: vec![1, 1],
        };
        let weights = ClassifierLossWeights {
            alpha: 0.5,
            alpha_p_eff: 0.25,
            alpha_u_eff: 0.0,
            include_adv: true,
            regularizer: RegularizerKind::None,
        };
        let batches = ClassifierBatches {
            unlabeled_x: &x,
            labeled: &labeled,
            generated: Some(&gen),
        };
        let mut r = RngStream::new(13, streams::INPUT_NOISE);
        let (parts, _) = classifier_loss(&model, &batches, &weights, &mut r).unwrap();

        // direct recomputation
        let probs = model.classifier.predict_probs(&x).unwrap();
        let d_all = model.discriminator.score_all_labels(&x).unwrap();
        let mut adv = 0.0;
        for i in 0..2 {
            for y in 0..k {
                adv += probs.at(i, y) * (-softplus(d_all.at(i, y)));
            }
        }
        adv *= 0.5 / 2.0;
        assert!(close(parts.adv, adv, 1e-12), "{} vs {adv}", parts.adv);

        let lp = model.classifier.predict_probs(&labeled.x).unwrap();
        let r_c = -(lp.at(0, 0).ln() + lp.at(1, 2).ln()) / 2.0;
        assert!(close(parts.r_c, r_c, 1e-12));

        let gp = model.classifier.predict_probs(&gen.x).unwrap();
        let r_p = -(gp.at(0, 1).ln() + gp.at(1, 1).ln()) / 2.0;
        assert!(close(parts.r_p, r_p, 1e-12));

        assert!(close(
            parts.total,
            parts.adv + parts.r_c + 0.25 * parts.r_p,
            1e-12
        ));
    }

    #[test]
    fn regularizer_values() {
        let k = 4;
        let mut model = test_model(14, k, true); // zero weights: uniform p_c
        model.classifier.dropout = 0.0;
        model.classifier.input_noise = 0.0;
        let mut rng = RngStream::new(15, streams::DATA_GEN);
        let x = Tensor::randn(&[5, 2], 0.5, &mut rng);
        let labeled = PairBatch {
            x: Tensor::randn(&[2, 2], 0.5, &mut rng),
            y: vec![0, 1],
        };
        let batches = ClassifierBatches {
            unlabeled_x: &x,
            labeled: &labeled,
            generated: None,
        };

        // uniform predictions: entropy = ln k
        let weights = ClassifierLossWeights {
            alpha: 0.5,
            alpha_p_eff: 0.0,
            alpha_u_eff: 1.0,
            include_adv: false,
            regularizer: RegularizerKind::Entropy,
        };
        let mut r = RngStream::new(16, streams::INPUT_NOISE);
        let (parts, _) = classifier_loss(&model, &batches, &weights, &mut r).unwrap();
        assert!(close(parts.r_u, (k as f64).ln(), 1e-12));

        // consistency with stochastic layers disabled: identical passes, 0
        let weights = ClassifierLossWeights {
            regularizer: RegularizerKind::Consistency,
            ..weights
        };
        let mut r = RngStream::new(17, streams::INPUT_NOISE);
        let (parts, _) = classifier_loss(&model, &batches, &weights, &mut r).unwrap();
        assert_eq!(parts.r_u, 0.0);

        // mean teacher with teacher == student and no noise: 0
        let weights = ClassifierLossWeights {
            regularizer: RegularizerKind::MeanTeacher,
            ..weights
        };
        let mut r = RngStream::new(18, streams::INPUT_NOISE);
        let (parts, _) = classifier_loss(&model, &batches, &weights, &mut r).unwrap();
        assert_eq!(parts.r_u, 0.0);
    }

    #[test]
    fn generator_loss_values_at_d_half() {
        let k = 4;
        let model = test_model(19, k, true); // zero weights: D = 1/2
        let mut rng = RngStream::new(20, streams::LATENT);
        let z = sample_latent(6, 4, &mut rng);
        let y: Vec<usize> = (0..6).map(|i| i % k).collect();
        let (v_mm, grads) =
            generator_loss(&model, &y, &z, 0.5, GenLossVariant::Minimax).unwrap();
        assert!(close(v_mm, -(1.0 - 0.5) * 2.0f64.ln(), 1e-12));
        assert_eq!(grads.len(), model.generator.flat().len());
        let (v_ns, _) =
            generator_loss(&model, &y, &z, 0.5, GenLossVariant::NonSaturating).unwrap();
        assert!(close(v_ns, (1.0 - 0.5) * 2.0f64.ln(), 1e-12));
    }

    #[test]
    fn generator_loss_matches_manual_single_sample() {
        let k = 3;
        let model = test_model(21, k, false);
        let mut rng = RngStream::new(22, streams::LATENT);
        let z = sample_latent(1, 4, &mut rng);
        let y = vec![2usize];
        let (v, _) = generator_loss(&model, &y, &z, 0.4, GenLossVariant::Minimax).unwrap();
        let x_fake = model.generator.generate(&y, &z).unwrap();
        let logit = model.discriminator.score_pairs(&x_fake, &y).unwrap().data()[0];
        let manual = (1.0 - 0.4) * (-softplus(logit));
        assert!(close(v, manual, 1e-12), "{v} vs {manual}");
    }

    #[test]
    fn pseudo_pair_augment_fraction_and_frequencies() {
        let k = 4;
        let model = test_model(23, k, false);
        let mut rng = RngStream::new(24, streams::PSEUDO_LABEL);
        let x = Tensor::randn(&[10, 2], 0.5, &mut rng);

        let empty = pseudo_pair_augment(&model, &x, 0.0, false, &mut rng).unwrap();
        assert!(empty.is_empty());

        let half = pseudo_pair_augment(&model, &x, 0.5, false, &mut rng).unwrap();
        assert_eq!(half.len(), 5);

        // frequencies of sampled labels match the predictive distribution
        let one = x.gather_rows(&[0]);
        let probs = model.classifier.predict_probs(&one).unwrap();
        let mut counts = vec![0usize; k];
        let trials = 100_000;
        for _ in 0..trials {
            let p = pseudo_pair_augment(&model, &one, 1.0, false, &mut rng).unwrap();
            counts[p.y[0]] += 1;
        }
        for (c, &p) in counts.iter().zip(probs.row(0)) {
            let f = *c as f64 / trials as f64;
            assert!((f - p).abs() < 0.01, "freq {f} vs prob {p}");
        }
    }

    #[test]
    fn gradient_isolation_across_players() {
        let k = 4;
        let model = test_model(25, k, false);
        let (pos, cls, gen) = tiny_batches(26, k, 4);

        // discriminator loss only reaches theta_d (the API only exposes D
        // grads; verify they are not all zero and that C/G params are
        // untouched by construction of separate graphs)
        let (_, d_grads) = discriminator_loss(&model, &pos, &cls, &gen, 0.5).unwrap();
        assert!(d_grads.iter().any(|t| t.frobenius_norm() > 0.0));

        let mut rng = RngStream::new(27, streams::LATENT);
        let z = sample_latent(4, 4, &mut rng);
        let y = vec![0, 1, 2, 3];
        let (_, g_grads) = generator_loss(&model, &y, &z, 0.5, GenLossVariant::Minimax).unwrap();
        assert!(g_grads.iter().any(|t| t.frobenius_norm() > 0.0));

        let batches = ClassifierBatches {
            unlabeled_x: &cls.x,
            labeled: &pos,
            generated: Some(&gen),
        };
        let weights = ClassifierLossWeights {
            alpha: 0.5,
            alpha_p_eff: 0.1,
            alpha_u_eff: 1.0,
            include_adv: true,
            regularizer: RegularizerKind::MeanTeacher,
        };
        let mut r = RngStream::new(28, streams::INPUT_NOISE);
        let (_, c_grads) = classifier_loss(&model, &batches, &weights, &mut r).unwrap();
        assert!(c_grads.iter().any(|t| t.frobenius_norm() > 0.0));
        assert_eq!(c_grads.len(), model.classifier.flat().len());
    }

    fn tiny_trainer(seed: u64, lr: f64) -> Trainer {
        let train = make_mixture(4, 30, 0.75, 0.08, 2, seed, SplitTag::Train).unwrap();
        let split = split_semi(&train, 4, seed).unwrap();
        let model = test_model(seed, 4, false);
        let hp = GameHyperparams {
            alpha: 0.5,
            alpha_p: Schedule::rampup(0.3, 10, 20),
            alpha_u: Schedule::rampup(1.0, 20, 0),
            m_d: 8,
            m_c: 8,
            m_g: 8,
            regularizer: RegularizerKind::MeanTeacher,
            ema_decay: 0.95,
            gen_loss: GenLossVariant::Minimax,
            rho: 0.5,
            total_iters: 40,
            pretrain_iters: 5,
        };
        let adam = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let optim = OptimSettings {
            classifier: adam,
            discriminator: adam,
            generator: adam,
        };
        Trainer::new(model, hp, optim, train, split, seed).unwrap()
    }

    #[test]
    fn zero_lr_leaves_players_bitwise_unchanged() {
        let mut t = tiny_trainer(31, 0.0);
        let c0: Vec<Tensor> = t.model.classifier.flat().into_iter().cloned().collect();
        let d0: Vec<Tensor> = t.model.discriminator.flat().into_iter().cloned().collect();
        let g0: Vec<Tensor> = t.model.generator.flat().into_iter().cloned().collect();
        for _ in 0..10 {
            t.step().unwrap();
        }
        assert_eq!(t.iter, 10);
        for (a, b) in t.model.classifier.flat().iter().zip(&c0) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in t.model.discriminator.flat().iter().zip(&d0) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in t.model.generator.flat().iter().zip(&g0) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_runs() {
        let run = || {
            let mut t = tiny_trainer(33, 3e-4);
            let mut out = Vec::new();
            for _ in 0..40 {
                let m = t.step().unwrap();
                out.push((
                    m.loss_d.to_bits(),
                    m.loss_g.to_bits(),
                    m.c_parts.total.to_bits(),
                ));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn seek_reproduces_batches_after_resume() {
        let mut a = tiny_trainer(35, 3e-4);
        for _ in 0..12 {
            a.step().unwrap();
        }
        let tail_a: Vec<u64> = (0..5).map(|_| a.step().unwrap().c_parts.total.to_bits()).collect();

        let mut b = tiny_trainer(35, 3e-4);
        for _ in 0..12 {
            b.step().unwrap();
        }
        // state transfer: copy model/optimizers, then seek
        let mut c = tiny_trainer(35, 3e-4);
        c.model = b.model.clone();
        c.adam_c = b.adam_c.clone();
        c.adam_d = b.adam_d.clone();
        c.adam_g = b.adam_g.clone();
        c.seek_to_iter(12);
        let tail_c: Vec<u64> = (0..5).map(|_| c.step().unwrap().c_parts.total.to_bits()).collect();
        assert_eq!(tail_a, tail_c);
    }

    #[test]
    fn low_data_regime_runs_without_unlabeled_pool() {
        let train = make_mixture(4, 30, 0.75, 0.08, 2, 37, SplitTag::Train).unwrap();
        let split = split_semi(&train, 8, 37).unwrap().without_unlabeled();
        let model = test_model(37, 4, false);
        let hp = GameHyperparams {
            alpha: 0.5,
            alpha_p: Schedule::rampup(0.3, 5, 5),
            alpha_u: Schedule::rampup(1.0, 20, 0),
            m_d: 8,
            m_c: 8,
            m_g: 8,
            regularizer: RegularizerKind::MeanTeacher,
            ema_decay: 0.95,
            gen_loss: GenLossVariant::Minimax,
            rho: 0.5,
            total_iters: 20,
            pretrain_iters: 3,
        };
        let optim = OptimSettings {
            classifier: AdamConfig::default(),
            discriminator: AdamConfig::default(),
            generator: AdamConfig::default(),
        };
        let mut t = Trainer::new(model, hp, optim, train, split, 37).unwrap();
        for _ in 0..20 {
            let m = t.step().unwrap();
            // no unlabeled pool: the regularizer is inactive
            assert_eq!(m.alpha_u_eff, 0.0);
            assert_eq!(m.c_parts.r_u, 0.0);
        }
    }
}
