//! Exact finite-space version of the three-player game.
//!
//! Every distribution is a probability table: p(x,y) over a finite grid, the
//! classifier's conditionals p_c(y|x) as softmax rows of a logit table, the
//! generator's conditionals p_g(x|y) likewise, and the discriminator as a
//! sigmoid table. On this representation the adversarial value, the optimal
//! discriminator, the divergences and the equilibrium can all be computed in
//! closed form, which turns the game's equilibrium claims into checkable
//! numerical identities:
//!
//! * the optimal discriminator is p / (p + p_alpha) with
//!   p_alpha = (1 - alpha) p_g + alpha p_c;
//! * the value at the optimal discriminator is -ln 4 + 2 JSD(p || p_alpha);
//! * when p = p_alpha, all three joints share their marginals;
//! * the classifier-logit gradient of the pseudo-discriminative loss equals
//!   that of KL(p_g || p_c), and their difference is constant in the logits;
//! * with the cross-entropy terms active, alternating optimization drives
//!   both model joints to p; without them only the mixture converges.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const LN_4: f64 = 1.3862943611198906; // 2 ln 2

/// Nonnegative |X| x |Y| table summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularJoint {
    table: Tensor,
}

impl TabularJoint {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "tabular_joint",
                expected: "[|X|, |Y|]".into(),
                got: format!("{:?}", table.shape()),
            });
        }
        if table.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(
                "tabular_joint: entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = table.data().iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Numeric(format!(
                "tabular_joint: total mass {total} is not 1"
            )));
        }
        Ok(TabularJoint { table })
    }

    /// Normalize arbitrary nonnegative weights into a joint.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let total: f64 = weights.data().iter().sum();
        if total <= 0.0 {
            return Err(Error::Numeric("tabular_joint: zero total mass".into()));
        }
        let data = weights.data().iter().map(|v| v / total).collect();
        let mut t = Tensor::new(weights.shape().to_vec(), data)?;
        // compensate the last cell for rounding so the total is exactly 1ish
        let sum: f64 = t.data().iter().sum();
        let last = t.len() - 1;
        t.data_mut()[last] += 1.0 - sum;
        TabularJoint::new(t)
    }

    /// Uniformly random strictly positive joint.
    pub fn random(nx: usize, ny: usize, rng: &mut RngStream) -> Self {
        let data: Vec<f64> = (0..nx * ny).map(|_| 0.05 + rng.uniform()).collect();
        TabularJoint::from_weights(Tensor::new(vec![nx, ny], data).unwrap()).unwrap()
    }

    pub fn nx(&self) -> usize {
        self.table.rows()
    }

    pub fn ny(&self) -> usize {
        self.table.cols()
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table.at(x, y)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn linf_diff(&self, other: &TabularJoint) -> f64 {
        self.table.linf_diff(&other.table)
    }

    /// Row sums p(x) and column sums p(y).
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let (nx, ny) = (self.nx(), self.ny());
        let mut px = vec![0.0; nx];
        let mut py = vec![0.0; ny];
        for x in 0..nx {
            for y in 0..ny {
                let v = self.at(x, y);
                px[x] += v;
                py[y] += v;
            }
        }
        (px, py)
    }
}

/// KL divergence sum q1 ln(q1/q2) in nats; 0 ln 0 := 0; +inf when q1 puts
/// mass where q2 has none.
pub fn kl(q1: &TabularJoint, q2: &TabularJoint) -> f64 {
    debug_assert_eq!(q1.table().shape(), q2.table().shape());
    let mut total = 0.0;
    for (&a, &b) in q1.table().data().iter().zip(q2.table().data()) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return f64::INFINITY;
        }
        total += a * (a / b).ln();
    }
    total
}

/// Jensen-Shannon divergence; symmetric, in [0, ln 2].
pub fn jsd(q1: &TabularJoint, q2: &TabularJoint) -> f64 {
    let mid_data: Vec<f64> = q1
        .table()
        .data()
        .iter()
        .zip(q2.table().data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let mid = TabularJoint::new(Tensor::new(q1.table().shape().to_vec(), mid_data).unwrap())
        .expect("midpoint is a valid joint");
    0.5 * kl(q1, &mid) + 0.5 * kl(q2, &mid)
}

/// The exact game state: target joint, player logit tables, mixing weight.
#[derive(Debug, Clone)]
pub struct TabularGame {
    pub p: TabularJoint,
    /// |X| x |Y|; softmax rows give p_c(y|x).
    pub c_logits: Tensor,
    /// |Y| x |X|; softmax rows give p_g(x|y).
    pub g_logits: Tensor,
    /// |X| x |Y|; sigmoid gives D(x,y).
    pub d_logits: Tensor,
    pub alpha: f64,
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (n, k) = (t.rows(), t.cols());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = t.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slot = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (o, &v) in slot.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in slot.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![n, k], out).unwrap()
}

impl TabularGame {
    pub fn random(nx: usize, ny: usize, alpha: f64, rng: &mut RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(Error::Contract(format!(
                "tabular game: alpha must be in (0, 1), got {alpha}"
            )));
        }
        Ok(TabularGame {
            p: TabularJoint::random(nx, ny, rng),
            c_logits: Tensor::randn(&[nx, ny], 1.0, rng),
            g_logits: Tensor::randn(&[ny, nx], 1.0, rng),
            d_logits: Tensor::randn(&[nx, ny], 1.0, rng),
            alpha,
        })
    }

    pub fn nx(&self) -> usize {
        self.p.nx()
    }

    pub fn ny(&self) -> usize {
        self.p.ny()
    }

    /// p_c(y|x) rows.
    pub fn c_cond(&self) -> Tensor {
        softmax_rows(&self.c_logits)
    }

    /// p_g(x|y) rows.
    pub fn g_cond(&self) -> Tensor {
        softmax_rows(&self.g_logits)
    }

    /// p_c(x,y) = p(x) p_c(y|x).
    pub fn pc_joint(&self) -> TabularJoint {
        let (px, _) = self.p.marginals();
        let cond = self.c_cond();
        let (nx, ny) = (self.nx(), self.ny());
        let mut data = vec![0.0; nx * ny];
        for x in 0..nx {
            for y in 0..ny {
                data[x * ny + y] = px[x] * cond.at(x, y);
            }
        }
        TabularJoint::new(Tensor::new(vec![nx, ny], data).unwrap())
            .expect("pc joint is a valid joint")
    }

    /// p_g(x,y) = p(y) p_g(x|y), laid out as |X| x |Y|.
    pub fn pg_joint(&self) -> TabularJoint {
        let (_, py) = self.p.marginals();
        let cond = self.g_cond();
        let (nx, ny) = (self.nx(), self.ny());
        let mut data = vec![0.0; nx * ny];
        for x in 0..nx {
            for y in 0..ny {
                data[x * ny + y] = py[y] * cond.at(y, x);
            }
        }
        TabularJoint::new(Tensor::new(vec![nx, ny], data).unwrap())
            .expect("pg joint is a valid joint")
    }

    /// D(x,y) = sigmoid(d_logits).
    pub fn d_table(&self) -> Tensor {
        let data = self
            .d_logits
            .data()
            .iter()
            .map(|&v| crate::graph::sigmoid(v))
            .collect();
        Tensor::new(self.d_logits.shape().to_vec(), data).unwrap()
    }
}

/// Mixture (1 - alpha) p_g + alpha p_c.
pub fn mix_alpha(pc: &TabularJoint, pg: &TabularJoint, alpha: f64) -> TabularJoint {
    let data: Vec<f64> = pc
        .table()
        .data()
        .iter()
        .zip(pg.table().data())
        .map(|(c, g)| alpha * c + (1.0 - alpha) * g)
        .collect();
    TabularJoint::new(Tensor::new(pc.table().shape().to_vec(), data).unwrap())
        .expect("mixture of joints is a joint")
}

/// Closed-form optimal discriminator p / (p + p_alpha); cells with no mass on
/// either side are set to 1/2.
pub fn optimal_discriminator(
    p: &TabularJoint,
    pc: &TabularJoint,
    pg: &TabularJoint,
    alpha: f64,
) -> Tensor {
    let pa = mix_alpha(pc, pg, alpha);
    let data: Vec<f64> = p
        .table()
        .data()
        .iter()
        .zip(pa.table().data())
        .map(|(&num, &mix)| {
            if num == 0.0 && mix == 0.0 {
                0.5
            } else {
                num / (num + mix)
            }
        })
        .collect();
    Tensor::new(p.table().shape().to_vec(), data).unwrap()
}

/// sum p ln D + p_alpha ln(1 - D) for an explicit D table, with 0 ln 0 := 0.
/// Returns -inf when positive mass meets a log of zero.
pub fn exact_u_with_table(
    p: &TabularJoint,
    pc: &TabularJoint,
    pg: &TabularJoint,
    alpha: f64,
    d: &Tensor,
) -> f64 {
    let pa = mix_alpha(pc, pg, alpha);
    let mut total = 0.0;
    for ((&pv, &av), &dv) in p
        .table()
        .data()
        .iter()
        .zip(pa.table().data())
        .zip(d.data())
    {
        if pv > 0.0 {
            if dv == 0.0 {
                return f64::NEG_INFINITY;
            }
            total += pv * dv.ln();
        }
        if av > 0.0 {
            if dv == 1.0 {
                return f64::NEG_INFINITY;
            }
            total += av * (-dv).ln_1p();
        }
    }
    total
}

/// Adversarial value of the game at its own discriminator table.
pub fn exact_u(game: &TabularGame) -> f64 {
    exact_u_with_table(
        &game.p,
        &game.pc_joint(),
        &game.pg_joint(),
        game.alpha,
        &game.d_table(),
    )
}

/// The two routes to V(C, G) = max_D U.
#[derive(Debug, Clone, Copy)]
pub struct ValueIdentity {
    /// U evaluated at the closed-form optimal discriminator.
    pub plug_in: f64,
    /// -ln 4 + 2 JSD(p || p_alpha), computed independently.
    pub via_jsd: f64,
    pub diff: f64,
}

pub fn exact_v(p: &TabularJoint, pc: &TabularJoint, pg: &TabularJoint, alpha: f64) -> ValueIdentity {
    let d_star = optimal_discriminator(p, pc, pg, alpha);
    let plug_in = exact_u_with_table(p, pc, pg, alpha, &d_star);
    let pa = mix_alpha(pc, pg, alpha);
    let via_jsd = -LN_4 + 2.0 * jsd(p, &pa);
    ValueIdentity {
        plug_in,
        via_jsd,
        diff: (plug_in - via_jsd).abs(),
    }
}

/// Gradient-ascent maximization of U over the discriminator logits; an
/// independent numerical route to the closed-form optimum.
pub fn maximize_discriminator(
    p: &TabularJoint,
    pc: &TabularJoint,
    pg: &TabularJoint,
    alpha: f64,
    iters: usize,
    step: f64,
) -> Tensor {
    let pa = mix_alpha(pc, pg, alpha);
    let (nx, ny) = (p.nx(), p.ny());
    let mut logits = Tensor::zeros(&[nx, ny]);
    for _ in 0..iters {
        for x in 0..nx {
            for y in 0..ny {
                let d = crate::graph::sigmoid(logits.at(x, y));
                // dU/dl = p (1 - d) - p_alpha d
                let g = p.at(x, y) * (1.0 - d) - pa.at(x, y) * d;
                logits.set(x, y, logits.at(x, y) + step * g);
            }
        }
    }
    let data = logits.data().iter().map(|&l| crate::graph::sigmoid(l)).collect();
    Tensor::new(vec![nx, ny], data).unwrap()
}

/// R_P = sum_{x,y} p_g(x,y) (-ln p_c(y|x)).
pub fn pseudo_discriminative_loss(game: &TabularGame) -> f64 {
    let pg = game.pg_joint();
    let cond = game.c_cond();
    let mut total = 0.0;
    for x in 0..game.nx() {
        for y in 0..game.ny() {
            let w = pg.at(x, y);
            if w > 0.0 {
                total -= w * cond.at(x, y).ln();
            }
        }
    }
    total
}

/// R_C = sum_{x,y} p(x,y) (-ln p_c(y|x)).
pub fn supervised_cross_entropy(game: &TabularGame) -> f64 {
    let cond = game.c_cond();
    let mut total = 0.0;
    for x in 0..game.nx() {
        for y in 0..game.ny() {
            let w = game.p.at(x, y);
            if w > 0.0 {
                total -= w * cond.at(x, y).ln();
            }
        }
    }
    total
}

/// Analytic classifier-logit gradient of a cross-entropy-against-`weights`
/// term sum_{x,y} weights(x,y) (-ln p_c(y|x)):
/// grad[x,y'] = w_x(x) p_c(y'|x) - weights(x,y') with w_x the x-marginal.
fn ce_grad_wrt_c_logits(weights: &TabularJoint, c_cond: &Tensor) -> Tensor {
    let (nx, ny) = (weights.nx(), weights.ny());
    let (wx, _) = weights.marginals();
    let mut data = vec![0.0; nx * ny];
    for x in 0..nx {
        for y in 0..ny {
            data[x * ny + y] = wx[x] * c_cond.at(x, y) - weights.at(x, y);
        }
    }
    Tensor::new(vec![nx, ny], data).unwrap()
}

/// KL(p_g || p_c) gradient w.r.t. the classifier logits via the chain rule
/// through the p_c joint table: dKL/djoint = -p_g/p_c_joint, then the
/// softmax-times-p(x) Jacobian. An algebraically independent route from
/// [`ce_grad_wrt_c_logits`].
fn kl_grad_wrt_c_logits(game: &TabularGame) -> Tensor {
    let (nx, ny) = (game.nx(), game.ny());
    let pg = game.pg_joint();
    let pc_joint = game.pc_joint();
    let cond = game.c_cond();
    let (px, _) = game.p.marginals();
    let mut data = vec![0.0; nx * ny];
    for x in 0..nx {
        for yp in 0..ny {
            let mut acc = 0.0;
            for y in 0..ny {
                let dkl_djoint = -pg.at(x, y) / pc_joint.at(x, y);
                let delta = if y == yp { 1.0 } else { 0.0 };
                let djoint_dlogit = px[x] * cond.at(x, y) * (delta - cond.at(x, yp));
                acc += dkl_djoint * djoint_dlogit;
            }
            data[x * ny + yp] = acc;
        }
    }
    Tensor::new(vec![nx, ny], data).unwrap()
}

/// Output of [`rp_kl_equivalence_check`].
#[derive(Debug, Clone, Copy)]
pub struct RpKlReport {
    /// max |grad R_P - grad KL(p_g || p_c)| over classifier logits.
    pub grad_gap: f64,
    /// max change of (R_P - KL) under random logit perturbations.
    pub value_gap_drift: f64,
}

/// Verifies that minimizing R_P over the classifier is the same problem as
/// minimizing KL(p_g || p_c): identical logit gradients, and a value gap that
/// does not move when the logits do.
pub fn rp_kl_equivalence_check(game: &TabularGame, rng: &mut RngStream) -> RpKlReport {
    let grad_rp = ce_grad_wrt_c_logits(&game.pg_joint(), &game.c_cond());
    let grad_kl = kl_grad_wrt_c_logits(game);
    let grad_gap = grad_rp.linf_diff(&grad_kl);

    let gap_at = |g: &TabularGame| {
        pseudo_discriminative_loss(g) - kl(&g.pg_joint(), &g.pc_joint())
    };
    let base_gap = gap_at(game);
    let mut value_gap_drift = 0.0f64;
    for _ in 0..10 {
        let mut perturbed = game.clone();
        let noise = Tensor::randn(&[game.nx(), game.ny()], 0.5, rng);
        for (l, n) in perturbed.c_logits.data_mut().iter_mut().zip(noise.data()) {
            *l += n;
        }
        value_gap_drift = value_gap_drift.max((gap_at(&perturbed) - base_gap).abs());
    }
    RpKlReport {
        grad_gap,
        value_gap_drift,
    }
}

/// One run of the alternating equilibrium solver.
#[derive(Debug, Clone)]
pub struct EquilibriumRun {
    pub game: TabularGame,
    /// Per-round max |p_c - p| over joint tables.
    pub dist_c: Vec<f64>,
    /// Per-round max |p_g - p| over joint tables.
    pub dist_g: Vec<f64>,
    /// Distance grew for 50 consecutive rounds at some point.
    pub diverged: bool,
}

impl EquilibriumRun {
    pub fn final_dist_c(&self) -> f64 {
        *self.dist_c.last().unwrap()
    }

    pub fn final_dist_g(&self) -> f64 {
        *self.dist_g.last().unwrap()
    }

    /// max |p - p_alpha| at the final iterate.
    pub fn final_mixture_gap(&self) -> f64 {
        let pa = mix_alpha(
            &self.game.pc_joint(),
            &self.game.pg_joint(),
            self.game.alpha,
        );
        self.game.p.linf_diff(&pa)
    }
}

/// Extra divergence added to the objective (regularizer-invariance check).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtraDivergence {
    None,
    /// lambda * KL(p_c || p_g), minimized by both players.
    KlCG { lambda: f64 },
}

/// Alternating optimization of the game: each round sets D to the closed-form
/// optimum, then moves both players' logits one gradient step.
///
/// With `alpha_p > 0` the players descend the full objective (adversarial
/// terms plus R_C plus alpha_p R_P on the classifier side). With
/// `alpha_p = 0` both cross-entropy terms are dropped, leaving the bare
/// adversarial game whose equilibria are only constrained to p = p_alpha.
pub fn solve_equilibrium(
    p: &TabularJoint,
    alpha: f64,
    alpha_p: f64,
    rng: &mut RngStream,
    iters: usize,
    step: f64,
) -> Result<EquilibriumRun> {
    solve_equilibrium_regularized(p, alpha, alpha_p, ExtraDivergence::None, rng, iters, step)
}

pub fn solve_equilibrium_regularized(
    p: &TabularJoint,
    alpha: f64,
    alpha_p: f64,
    extra: ExtraDivergence,
    rng: &mut RngStream,
    iters: usize,
    step: f64,
) -> Result<EquilibriumRun> {
    let (nx, ny) = (p.nx(), p.ny());
    let c0 = Tensor::randn(&[nx, ny], 0.5, rng);
    let g0 = Tensor::randn(&[ny, nx], 0.5, rng);
    solve_equilibrium_from(p, alpha, alpha_p, extra, c0, g0, iters, step)
}

/// Solver body with explicit initial logits (useful for starting exactly at
/// the equilibrium).
#[allow(clippy::too_many_arguments)]
pub fn solve_equilibrium_from(
    p: &TabularJoint,
    alpha: f64,
    alpha_p: f64,
    extra: ExtraDivergence,
    c_logits: Tensor,
    g_logits: Tensor,
    iters: usize,
    step: f64,
) -> Result<EquilibriumRun> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    if alpha_p < 0.0 {
        return Err(Error::Contract(format!(
            "alpha_p must be >= 0, got {alpha_p}"
        )));
    }
    let (nx, ny) = (p.nx(), p.ny());
    let mut game = TabularGame {
        p: p.clone(),
        c_logits,
        g_logits,
        d_logits: Tensor::zeros(&[nx, ny]),
        alpha,
    };
    let (px, py) = p.marginals();

    let mut dist_c = Vec::with_capacity(iters);
    let mut dist_g = Vec::with_capacity(iters);
    let mut grow_streak = 0usize;
    let mut diverged = false;
    let mut prev_total = f64::INFINITY;

    for _ in 0..iters {
        let c_cond = game.c_cond();
        let g_cond = game.g_cond();
        let pc = game.pc_joint();
        let pg = game.pg_joint();

        // analytic optimal discriminator for this round
        let d_star = optimal_discriminator(p, &pc, &pg, alpha);
        // log(1 - D*) table; D* < 1 wherever p_alpha > 0, which positive
        // marginals guarantee
        let mut log1md = vec![0.0; nx * ny];
        for (slot, &d) in log1md.iter_mut().zip(d_star.data()) {
            *slot = (1.0 - d).ln();
        }
        let l = |x: usize, y: usize| log1md[x * ny + y];

        // classifier gradient: alpha E_{p_c}[ln(1-D)] (+ R_C + alpha_p R_P)
        let mut grad_c = Tensor::zeros(&[nx, ny]);
        for x in 0..nx {
            let mut mean_l = 0.0;
            for y in 0..ny {
                mean_l += c_cond.at(x, y) * l(x, y);
            }
            for y in 0..ny {
                let adv = alpha * px[x] * c_cond.at(x, y) * (l(x, y) - mean_l);
                grad_c.set(x, y, adv);
            }
        }
        if alpha_p > 0.0 {
            let rc = ce_grad_wrt_c_logits(&game.p, &c_cond);
            let rp = ce_grad_wrt_c_logits(&pg, &c_cond);
            for ((g, a), b) in grad_c
                .data_mut()
                .iter_mut()
                .zip(rc.data())
                .zip(rp.data())
            {
                *g += a + alpha_p * b;
            }
        }

        // generator gradient: (1 - alpha) E_{p_g}[ln(1-D)]
        let mut grad_g = Tensor::zeros(&[ny, nx]);
        for y in 0..ny {
            let mut mean_l = 0.0;
            for x in 0..nx {
                mean_l += g_cond.at(y, x) * l(x, y);
            }
            for x in 0..nx {
                let adv = (1.0 - alpha) * py[y] * g_cond.at(y, x) * (l(x, y) - mean_l);
                grad_g.set(y, x, adv);
            }
        }

        if let ExtraDivergence::KlCG { lambda } = extra {
            if lambda > 0.0 {
                // d/dc KL(p_c || p_g) and d/dg KL(p_c || p_g)
                let (_, pc_y) = pc.marginals();
                let _ = pc_y;
                for x in 0..nx {
                    let mut mean_r = 0.0;
                    for y in 0..ny {
                        mean_r += c_cond.at(x, y) * (pc.at(x, y) / pg.at(x, y)).ln();
                    }
                    for y in 0..ny {
                        let r = (pc.at(x, y) / pg.at(x, y)).ln();
                        let g = lambda * px[x] * c_cond.at(x, y) * (r - mean_r);
                        grad_c.set(x, y, grad_c.at(x, y) + g);
                    }
                }
                for y in 0..ny {
                    let mut pc_col = 0.0;
                    for x in 0..nx {
                        pc_col += pc.at(x, y);
                    }
                    for x in 0..nx {
                        let g = lambda * (g_cond.at(y, x) * pc_col - pc.at(x, y));
                        grad_g.set(y, x, grad_g.at(y, x) + g);
                    }
                }
            }
        }

        // simultaneous gradient step on both players
        for (lgt, g) in game.c_logits.data_mut().iter_mut().zip(grad_c.data()) {
            *lgt -= step * g;
        }
        for (lgt, g) in game.g_logits.data_mut().iter_mut().zip(grad_g.data()) {
            *lgt -= step * g;
        }

        let dc = game.pc_joint().linf_diff(p);
        let dg = game.pg_joint().linf_diff(p);
        let total = dc + dg;
        if total > prev_total {
            grow_streak += 1;
            if grow_streak >= 50 {
                diverged = true;
            }
        } else {
            grow_streak = 0;
        }
        prev_total = total;
        dist_c.push(dc);
        dist_g.push(dg);
    }

    // expose the final optimal discriminator through the game's logits
    let d_star = optimal_discriminator(p, &game.pc_joint(), &game.pg_joint(), alpha);
    for (l, &d) in game.d_logits.data_mut().iter_mut().zip(d_star.data()) {
        let d = d.clamp(1e-12, 1.0 - 1e-12);
        *l = (d / (1.0 - d)).ln();
    }

    Ok(EquilibriumRun {
        game,
        dist_c,
        dist_g,
        diverged,
    })
}

/// Paired equilibrium runs with and without an extra divergence penalty.
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub plain: EquilibriumRun,
    pub regularized: EquilibriumRun,
}

/// The added divergence must not move the equilibrium: both runs should land
/// on p.
pub fn regularizer_invariance_check(
    p: &TabularJoint,
    alpha: f64,
    alpha_p: f64,
    lambda_extra: f64,
    seed: u64,
    iters: usize,
    step: f64,
) -> Result<InvarianceReport> {
    if lambda_extra < 0.0 {
        return Err(Error::Contract(format!(
            "lambda_extra must be >= 0, got {lambda_extra}"
        )));
    }
    let mut rng_a = RngStream::new(seed, crate::rng::streams::ORACLE);
    let plain = solve_equilibrium(p, alpha, alpha_p, &mut rng_a, iters, step)?;
    let mut rng_b = RngStream::new(seed, crate::rng::streams::ORACLE);
    let extra = if lambda_extra == 0.0 {
        ExtraDivergence::None
    } else {
        ExtraDivergence::KlCG {
            lambda: lambda_extra,
        }
    };
    let regularized =
        solve_equilibrium_regularized(p, alpha, alpha_p, extra, &mut rng_b, iters, step)?;
    Ok(InvarianceReport { plain, regularized })
}

/// Construct (p_c, p_g) with the players' structural marginals such that
/// p_alpha equals p exactly: perturb p by a doubly centered kernel, scaled to
/// keep everything nonnegative.
pub fn construct_matched_mixture(
    p: &TabularJoint,
    alpha: f64,
    rng: &mut RngStream,
) -> (TabularJoint, TabularJoint) {
    let (nx, ny) = (p.nx(), p.ny());
    let raw = Tensor::randn(&[nx, ny], 1.0, rng);
    // double-center: zero row sums and zero column sums
    let mut eps = vec![0.0; nx * ny];
    let total_mean: f64 = raw.data().iter().sum::<f64>() / (nx * ny) as f64;
    let row_means: Vec<f64> = (0..nx)
        .map(|x| raw.row(x).iter().sum::<f64>() / ny as f64)
        .collect();
    let col_means: Vec<f64> = (0..ny)
        .map(|y| (0..nx).map(|x| raw.at(x, y)).sum::<f64>() / nx as f64)
        .collect();
    for x in 0..nx {
        for y in 0..ny {
            eps[x * ny + y] = raw.at(x, y) - row_means[x] - col_means[y] + total_mean;
        }
    }
    let max_abs = eps.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min_p = p.table().data().iter().cloned().fold(f64::INFINITY, f64::min);
    // p_g = p + eps and p_c = p - ((1-alpha)/alpha) eps must stay nonnegative
    let budget = 0.9 * min_p * (alpha / (1.0 - alpha)).min(1.0);
    let scale = if max_abs > 0.0 { budget / max_abs } else { 0.0 };

    let mut pg_data = vec![0.0; nx * ny];
    let mut pc_data = vec![0.0; nx * ny];
    let ratio = (1.0 - alpha) / alpha;
    for i in 0..nx * ny {
        let e = eps[i] * scale;
        pg_data[i] = p.table().data()[i] + e;
        pc_data[i] = p.table().data()[i] - ratio * e;
    }
    let pg = TabularJoint::new(Tensor::new(vec![nx, ny], pg_data).unwrap())
        .expect("pg construction stays a joint");
    let pc = TabularJoint::new(Tensor::new(vec![nx, ny], pc_data).unwrap())
        .expect("pc construction stays a joint");
    (pc, pg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, streams::ORACLE)
    }

    #[test]
    fn joint_validation() {
        assert!(TabularJoint::new(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap()).is_ok());
        assert!(TabularJoint::new(Tensor::matrix(1, 2, vec![0.6, 0.5]).unwrap()).is_err());
        assert!(TabularJoint::new(Tensor::matrix(1, 2, vec![-0.1, 1.1]).unwrap()).is_err());
    }

    #[test]
    fn marginals_match_loop_oracle() {
        // uniform 2x2
        let u = TabularJoint::new(Tensor::matrix(2, 2, vec![0.25; 4]).unwrap()).unwrap();
        let (px, py) = u.marginals();
        assert_eq!(px, vec![0.5, 0.5]);
        assert_eq!(py, vec![0.5, 0.5]);

        // rank-1 joint recovers its factors
        let fx = [0.3, 0.7];
        let fy = [0.2, 0.5, 0.3];
        let mut data = vec![0.0; 6];
        for x in 0..2 {
            for y in 0..3 {
                data[x * 3 + y] = fx[x] * fy[y];
            }
        }
        let r1 = TabularJoint::new(Tensor::matrix(2, 3, data).unwrap()).unwrap();
        let (px, py) = r1.marginals();
        for (a, b) in px.iter().zip(fx.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in py.iter().zip(fy.iter()) {
            assert!((a - b).abs() < 1e-14);
        }

        // random joint against an independent double loop
        let q = TabularJoint::random(4, 3, &mut rng(1));
        let (px, py) = q.marginals();
        for x in 0..4 {
            let mut s = 0.0;
            for y in 0..3 {
                s += q.at(x, y);
            }
            assert!((px[x] - s).abs() < 1e-14);
        }
        for y in 0..3 {
            let mut s = 0.0;
            for x in 0..4 {
                s += q.at(x, y);
            }
            assert!((py[y] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_basics() {
        let q = TabularJoint::random(3, 3, &mut rng(2));
        assert_eq!(kl(&q, &q), 0.0);

        let a = TabularJoint::new(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap()).unwrap();
        let b = TabularJoint::new(Tensor::matrix(1, 2, vec![0.25, 0.75]).unwrap()).unwrap();
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl(&a, &b) - expect).abs() < 1e-12);
        assert!((expect - 0.143841).abs() < 1e-6);

        // support violation
        let c = TabularJoint::new(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let d = TabularJoint::new(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(kl(&c, &d), f64::INFINITY);
        // kl is fine when q1 has the zero
        assert!(kl(&d, &b).is_finite());
    }

    #[test]
    fn jsd_bounds_and_symmetry() {
        let mut r = rng(3);
        for _ in 0..20 {
            let a = TabularJoint::random(3, 4, &mut r);
            let b = TabularJoint::random(3, 4, &mut r);
            let ab = jsd(&a, &b);
            let ba = jsd(&b, &a);
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= 0.0 && ab <= 2.0f64.ln() + 1e-12);
        }
        // disjoint supports maximize jsd
        let c = TabularJoint::new(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let d = TabularJoint::new(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        assert!((jsd(&c, &d) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn optimal_discriminator_cases() {
        // p_c = p_g = p -> D* = 1/2 everywhere
        let p = TabularJoint::random(4, 3, &mut rng(4));
        let d = optimal_discriminator(&p, &p, &p, 0.5);
        for &v in d.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }

        // direct formula: p = 0.2, p_alpha = 0.1 -> 2/3 (single-cell check via
        // tables that put those masses in cell (0,0))
        let pt = TabularJoint::new(Tensor::matrix(1, 2, vec![0.2, 0.8]).unwrap()).unwrap();
        let pa = TabularJoint::new(Tensor::matrix(1, 2, vec![0.1, 0.9]).unwrap()).unwrap();
        let d2 = optimal_discriminator(&pt, &pa, &pa, 0.5);
        assert!((d2.at(0, 0) - 2.0 / 3.0).abs() < 1e-12);

        // degenerate cell: no mass on either side -> 1/2
        let zp = TabularJoint::new(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let d3 = optimal_discriminator(&zp, &zp, &zp, 0.5);
        assert_eq!(d3.at(0, 1), 0.5);
    }

    #[test]
    fn numerically_maximized_d_matches_closed_form() {
        let mut r = rng(5);
        let game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
        let (pc, pg) = (game.pc_joint(), game.pg_joint());
        let d_star = optimal_discriminator(&game.p, &pc, &pg, game.alpha);
        let d_num = maximize_discriminator(&game.p, &pc, &pg, game.alpha, 4000, 4.0);
        assert!(d_star.linf_diff(&d_num) < 1e-3);
    }

    #[test]
    fn exact_u_at_half_is_minus_ln4() {
        let mut r = rng(6);
        let game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
        let half = Tensor::full(&[4, 3], 0.5);
        let u = exact_u_with_table(&game.p, &game.pc_joint(), &game.pg_joint(), 0.5, &half);
        assert!((u + LN_4).abs() < 1e-12);

        // zero d_logits give the same value through the game path
        let mut g0 = game.clone();
        g0.d_logits = Tensor::zeros(&[4, 3]);
        assert!((exact_u(&g0) + LN_4).abs() < 1e-12);
    }

    #[test]
    fn exact_u_matches_loop_oracle() {
        let mut r = rng(7);
        let game = TabularGame::random(5, 4, 0.4, &mut r).unwrap();
        let u = exact_u(&game);
        // independent evaluation
        let (pc, pg, d) = (game.pc_joint(), game.pg_joint(), game.d_table());
        let mut expect = 0.0;
        for x in 0..5 {
            for y in 0..4 {
                let pa = 0.4 * pc.at(x, y) + 0.6 * pg.at(x, y);
                expect += game.p.at(x, y) * d.at(x, y).ln();
                expect += pa * (1.0 - d.at(x, y)).ln();
            }
        }
        assert!((u - expect).abs() < 1e-12);
    }

    #[test]
    fn value_identity_on_random_games() {
        let mut r = rng(8);
        for _ in 0..50 {
            let game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
            let v = exact_v(&game.p, &game.pc_joint(), &game.pg_joint(), game.alpha);
            assert!(v.diff < 1e-10, "identity gap {}", v.diff);
            assert!(v.plug_in >= -LN_4 - 1e-12);
        }
        // p_alpha = p: value is exactly -ln 4
        let p = TabularJoint::random(4, 3, &mut r);
        let v = exact_v(&p, &p, &p, 0.5);
        assert!((v.plug_in + LN_4).abs() < 1e-9);
        assert!(v.diff < 1e-12);
    }

    #[test]
    fn disjoint_supports_reach_value_zero() {
        let p = TabularJoint::new(Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap()).unwrap();
        let q = TabularJoint::new(Tensor::matrix(2, 2, vec![0.0, 0.5, 0.5, 0.0]).unwrap()).unwrap();
        let v = exact_v(&p, &q, &q, 0.5);
        assert!(v.plug_in.abs() < 1e-12, "value {}", v.plug_in);
    }

    #[test]
    fn d_star_maximality_against_perturbations() {
        let mut r = rng(9);
        let game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
        let (pc, pg) = (game.pc_joint(), game.pg_joint());
        let d_star = optimal_discriminator(&game.p, &pc, &pg, game.alpha);
        let u_star = exact_u_with_table(&game.p, &pc, &pg, game.alpha, &d_star);
        for _ in 0..100 {
            let noise = Tensor::randn(&[4, 3], 0.3, &mut r);
            let perturbed: Vec<f64> = d_star
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&d, &n)| {
                    let l = (d.clamp(1e-9, 1.0 - 1e-9) / (1.0 - d.clamp(1e-9, 1.0 - 1e-9))).ln();
                    crate::graph::sigmoid(l + n)
                })
                .collect();
            let dt = Tensor::new(vec![4, 3], perturbed).unwrap();
            let u = exact_u_with_table(&game.p, &pc, &pg, game.alpha, &dt);
            assert!(u <= u_star + 1e-12);
        }
    }

    #[test]
    fn analytic_c_gradients_match_finite_differences() {
        // validates both cross-entropy-style gradients and the KL route
        let mut r = rng(10);
        let game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
        let h = 1e-6;

        let rp_grad = ce_grad_wrt_c_logits(&game.pg_joint(), &game.c_cond());
        let kl_grad = kl_grad_wrt_c_logits(&game);
        for x in 0..4 {
            for y in 0..3 {
                let mut plus = game.clone();
                plus.c_logits.set(x, y, plus.c_logits.at(x, y) + h);
                let mut minus = game.clone();
                minus.c_logits.set(x, y, minus.c_logits.at(x, y) - h);

                let fd_rp = (pseudo_discriminative_loss(&plus)
                    - pseudo_discriminative_loss(&minus))
                    / (2.0 * h);
                assert!(
                    (rp_grad.at(x, y) - fd_rp).abs() < 1e-7,
                    "rp grad mismatch at ({x},{y}): {} vs {}",
                    rp_grad.at(x, y),
                    fd_rp
                );

                let fd_kl = (kl(&plus.pg_joint(), &plus.pc_joint())
                    - kl(&minus.pg_joint(), &minus.pc_joint()))
                    / (2.0 * h);
                assert!(
                    (kl_grad.at(x, y) - fd_kl).abs() < 1e-7,
                    "kl grad mismatch at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn rp_kl_equivalence_on_random_games() {
        let mut r = rng(11);
        for _ in 0..20 {
            let game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
            let report = rp_kl_equivalence_check(&game, &mut r);
            assert!(report.grad_gap < 1e-10, "grad gap {}", report.grad_gap);
            assert!(
                report.value_gap_drift < 1e-10,
                "value drift {}",
                report.value_gap_drift
            );
        }
    }

    #[test]
    fn rp_uniform_row_case() {
        // p_c(y|x) uniform: R_P = ln |Y| and the gradients still agree
        let mut r = rng(12);
        let mut game = TabularGame::random(4, 3, 0.5, &mut r).unwrap();
        game.c_logits = Tensor::zeros(&[4, 3]);
        let rp = pseudo_discriminative_loss(&game);
        assert!((rp - 3.0f64.ln()).abs() < 1e-12);
        let report = rp_kl_equivalence_check(&game, &mut r);
        assert!(report.grad_gap < 1e-10);
    }

    #[test]
    fn equilibrium_point_is_stationary() {
        // start exactly at p_c = p_g = p: distances stay tiny at every round
        let mut r = rng(13);
        let p = TabularJoint::random(4, 3, &mut r);
        let (px, py) = p.marginals();
        let mut c0 = Tensor::zeros(&[4, 3]);
        let mut g0 = Tensor::zeros(&[3, 4]);
        for x in 0..4 {
            for y in 0..3 {
                c0.set(x, y, (p.at(x, y) / px[x]).ln());
                g0.set(y, x, (p.at(x, y) / py[y]).ln());
            }
        }
        let run =
            solve_equilibrium_from(&p, 0.5, 0.5, ExtraDivergence::None, c0, g0, 500, 0.5)
                .unwrap();
        for (dc, dg) in run.dist_c.iter().zip(&run.dist_g) {
            assert!(*dc < 1e-9 && *dg < 1e-9, "drifted: {dc} / {dg}");
        }
    }

    #[test]
    fn solver_converges_with_pseudo_loss_and_not_without() {
        let mut r = rng(14);
        let p = TabularJoint::random(4, 3, &mut r);

        let run = solve_equilibrium(&p, 0.5, 0.5, &mut rng(100), 2000, 0.5).unwrap();
        assert!(
            run.final_dist_c() < 0.02 && run.final_dist_g() < 0.02,
            "dist_c {} dist_g {}",
            run.final_dist_c(),
            run.final_dist_g()
        );
        assert!(!run.diverged);

        // bare adversarial game: mixture matches but players need not
        let mut any_mismatch = false;
        for seed in 200..205 {
            let run0 = solve_equilibrium(&p, 0.5, 0.0, &mut rng(seed), 6000, 0.5).unwrap();
            if run0.final_mixture_gap() < 1e-3 && run0.final_dist_c() > 0.02 {
                any_mismatch = true;
            }
        }
        assert!(any_mismatch, "adversarial-only game always recovered p");
    }

    #[test]
    fn extra_divergence_does_not_move_equilibrium() {
        let mut r = rng(15);
        let p = TabularJoint::random(4, 3, &mut r);

        // lambda = 0 reproduces the plain trajectory bitwise
        let rep0 = regularizer_invariance_check(&p, 0.5, 0.5, 0.0, 77, 500, 0.5).unwrap();
        assert_eq!(rep0.plain.dist_c, rep0.regularized.dist_c);
        assert_eq!(rep0.plain.dist_g, rep0.regularized.dist_g);

        let rep = regularizer_invariance_check(&p, 0.5, 0.5, 0.1, 78, 2000, 0.5).unwrap();
        assert!(rep.plain.final_dist_c() < 0.02 && rep.plain.final_dist_g() < 0.02);
        assert!(
            rep.regularized.final_dist_c() < 0.02 && rep.regularized.final_dist_g() < 0.02,
            "regularized run drifted: {} / {}",
            rep.regularized.final_dist_c(),
            rep.regularized.final_dist_g()
        );
    }

    #[test]
    fn extra_divergence_vanishes_at_equilibrium() {
        // at p_c = p_g the added KL and its gradients are zero
        let mut r = rng(16);
        let p = TabularJoint::random(3, 3, &mut r);
        assert_eq!(kl(&p, &p), 0.0);
    }

    #[test]
    fn matched_mixture_construction_shares_marginals() {
        let mut r = rng(17);
        for _ in 0..20 {
            let p = TabularJoint::random(4, 3, &mut r);
            let (pc, pg) = construct_matched_mixture(&p, 0.5, &mut r);
            let pa = mix_alpha(&pc, &pg, 0.5);
            assert!(p.linf_diff(&pa) < 1e-12);
            let (px, py) = p.marginals();
            for (joint, name) in [(&pc, "pc"), (&pg, "pg")] {
                let (jx, jy) = joint.marginals();
                for (a, b) in jx.iter().zip(&px) {
                    assert!((a - b).abs() < 1e-10, "{name} x-marginal");
                }
                for (a, b) in jy.iter().zip(&py) {
                    assert!((a - b).abs() < 1e-10, "{name} y-marginal");
                }
            }
        }
    }
}
