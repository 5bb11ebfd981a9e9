//! `trigan`: train, evaluate and verify the three-player adversarial game.
//!
//! Exit codes: 0 on success, 1 on failed verification or runtime error,
//! 2 on usage or configuration errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use trigan_core::checkpoint::Container;
use trigan_core::config::Config;
use trigan_core::data::{Dataset, SplitTag};
use trigan_core::error::Error as CoreError;
use trigan_core::eval::{
    conditional_fidelity, error_rate, latent_interpolation, mmd2_per_class,
    train_oracle_classifier,
};
use trigan_core::gradsuite::composite_loss_suite;
use trigan_core::networks::sample_latent;
use trigan_core::oracle::{
    construct_matched_mixture, exact_v, jsd, maximize_discriminator, mix_alpha,
    optimal_discriminator, regularizer_invariance_check, rp_kl_equivalence_check,
    solve_equilibrium, TabularGame, TabularJoint,
};
use trigan_core::rng::{derive_seed, streams, RngStream};
use trigan_core::train::{
    build_trainer, config_from_checkpoint, restore_checkpoint, resume_training, run_training,
};

#[derive(Parser)]
#[command(
    name = "trigan",
    about = "Three-player adversarial training (classifier, conditional generator, pair discriminator) with an exact tabular verification oracle",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file (optionally resuming a checkpoint).
    Train {
        /// Path to the INI-style run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<String>,
        /// Override the configured data/model seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Force deterministic mode (also zeroes the time_ms metrics column).
        #[arg(long)]
        serial: bool,
    },
    /// Report test error, conditional fidelity and per-class MMD for a
    /// checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generated samples per class for the fidelity and MMD estimates.
        #[arg(long, default_value_t = 200)]
        per_class: usize,
    },
    /// Dump per-class samples and latent interpolation paths to CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Interpolation grid size per class.
        #[arg(long, default_value_t = 9)]
        steps: usize,
    },
    /// Generate the configured dataset and dump one split to CSV.
    DataGen {
        #[arg(long)]
        config: PathBuf,
        /// Which split to dump: train, val or test.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerically verify the game's equilibrium identities on exact
    /// probability tables.
    VerifyOracle {
        /// Random restarts per equilibrium target.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Directory for the per-round distance CSV (optional).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every composite loss against central finite differences.
    GradCheck {
        /// Batch size used in the checked losses.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Classifier hidden widths.
        #[arg(long, default_value = "32,32")]
        c_hidden: String,
        /// Generator hidden widths.
        #[arg(long, default_value = "32,32")]
        g_hidden: String,
        /// Discriminator trunk widths.
        #[arg(long, default_value = "32,16")]
        d_trunk: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<CoreError>(),
            Some(CoreError::Config { .. }) | Some(CoreError::ConfigValue { .. })
        )
    })
}

fn load_config(path: &Path) -> anyhow::Result<Config> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    Ok(Config::parse(&text)?)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
            serial,
        } => cmd_train(&config, out, seed, resume, serial),
        Command::Eval {
            checkpoint,
            per_class,
        } => cmd_eval(&checkpoint, per_class),
        Command::Sample {
            checkpoint,
            out,
            per_class,
            steps,
        } => cmd_sample(&checkpoint, &out, per_class, steps),
        Command::DataGen { config, split, out } => cmd_data_gen(&config, &split, &out),
        Command::VerifyOracle { seeds, out } => cmd_verify_oracle(seeds, out.as_deref()),
        Command::GradCheck {
            batch,
            c_hidden,
            g_hidden,
            d_trunk,
        } => cmd_grad_check(batch, &c_hidden, &g_hidden, &d_trunk),
    }
}

fn cmd_train(
    config_path: &Path,
    out: Option<String>,
    seed: Option<u64>,
    resume: Option<PathBuf>,
    serial: bool,
) -> anyhow::Result<bool> {
    let output = if let Some(resume_path) = resume {
        resume_training(&resume_path, out.as_deref())?
    } else {
        let mut config = load_config(config_path)?;
        if let Some(dir) = out {
            config.run.out_dir = dir;
        }
        if let Some(s) = seed {
            config.data.seed = s;
        }
        if serial {
            config.run.serial = true;
        }
        config.validate()?;
        run_training(&config)?
    };
    println!("run complete: {} iterations", output.trainer.iter);
    println!("outputs in {}", output.out_dir.display());
    if let Some(row) = output.last_row {
        println!(
            "final val error: student {:.4}, teacher {:.4}",
            row.err_val_student, row.err_val_teacher
        );
    }
    let test_err = error_rate(&output.trainer.model.classifier, &output.test)?;
    let test_err_teacher = error_rate(&output.trainer.model.teacher.classifier, &output.test)?;
    println!("test error: student {test_err:.4}, teacher {test_err_teacher:.4}");
    Ok(true)
}

/// Rebuild the trainer a checkpoint was saved from and restore its state.
fn load_model(checkpoint: &Path) -> anyhow::Result<(trigan_core::game::Trainer, Dataset, Dataset, Config)> {
    let container = Container::load(checkpoint)?;
    let config = config_from_checkpoint(&container)?;
    let (mut trainer, val, test) = build_trainer(&config)?;
    restore_checkpoint(&mut trainer, &container)?;
    Ok((trainer, val, test, config))
}

fn cmd_eval(checkpoint: &Path, per_class: usize) -> anyhow::Result<bool> {
    let (trainer, val, test, config) = load_model(checkpoint)?;
    let model = &trainer.model;

    println!("checkpoint: {} (iteration {})", checkpoint.display(), trainer.iter);
    let val_s = error_rate(&model.classifier, &val)?;
    let val_t = error_rate(&model.teacher.classifier, &val)?;
    let test_s = error_rate(&model.classifier, &test)?;
    let test_t = error_rate(&model.teacher.classifier, &test)?;
    println!("val error:  student {val_s:.4}, teacher {val_t:.4}");
    println!("test error: student {test_s:.4}, teacher {test_t:.4}");

    let (train, _, _) = trigan_core::train::build_datasets(&config.data)?;
    let (judge, judge_err) =
        train_oracle_classifier(&train, &test, derive_seed(config.data.seed, 501))?;
    println!("judge classifier test error: {judge_err:.4}");
    if judge_err > 0.02 {
        println!("warning: judge error above 2%; fidelity numbers are unreliable");
    }

    let mut rng = RngStream::new(derive_seed(config.data.seed, 502), streams::EVAL);
    let fidelity = conditional_fidelity(&model.generator, &judge, per_class, &mut rng)?;
    println!("conditional fidelity: overall {:.4}", fidelity.overall);
    for (c, f) in fidelity.per_class.iter().enumerate() {
        println!("  class {c}: {f:.4}");
    }

    let mmd = mmd2_per_class(&model.generator, &test, None, &mut rng)?;
    println!("per-class MMD^2 vs test data (median-heuristic bandwidths):");
    for c in 0..mmd.per_class.len() {
        println!(
            "  class {c}: mmd2 {:+.6} (bandwidth {:.4})",
            mmd.per_class[c], mmd.bandwidths[c]
        );
    }
    println!("mean MMD^2: {:+.6}", mmd.mean);
    Ok(true)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{header}")?;
    for row in rows {
        writeln!(file, "{row}")?;
    }
    Ok(())
}

fn feature_header(dim: usize) -> String {
    (0..dim)
        .map(|i| format!("x{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn cmd_sample(
    checkpoint: &Path,
    out: &Path,
    per_class: usize,
    steps: usize,
) -> anyhow::Result<bool> {
    let (trainer, _, _, config) = load_model(checkpoint)?;
    let generator = &trainer.model.generator;
    let k = generator.num_classes;
    let d = generator.data_dim();
    let mut rng = RngStream::new(derive_seed(config.data.seed, 503), streams::EVAL);

    let mut sample_rows = Vec::with_capacity(k * per_class);
    for c in 0..k {
        let z = sample_latent(per_class, generator.latent_dim, &mut rng);
        let x = generator.generate(&vec![c; per_class], &z)?;
        for i in 0..per_class {
            let coords = x
                .row(i)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            sample_rows.push(format!("{coords},{c}"));
        }
    }
    let samples_path = out.join("samples.csv");
    write_csv(
        &samples_path,
        &format!("{},label", feature_header(d)),
        &sample_rows,
    )?;

    let mut interp_rows = Vec::with_capacity(k * steps);
    for c in 0..k {
        let z0: Vec<f64> = (0..generator.latent_dim).map(|_| rng.normal()).collect();
        let z1: Vec<f64> = (0..generator.latent_dim).map(|_| rng.normal()).collect();
        let path = latent_interpolation(generator, c, &z0, &z1, steps)?;
        for s in 0..steps {
            let t = s as f64 / (steps - 1) as f64;
            let coords = path
                .row(s)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            interp_rows.push(format!("{c},{t},{coords}"));
        }
    }
    let interp_path = out.join("interpolation.csv");
    write_csv(
        &interp_path,
        &format!("label,t,{}", feature_header(d)),
        &interp_rows,
    )?;

    println!("wrote {}", samples_path.display());
    println!("wrote {}", interp_path.display());
    Ok(true)
}

fn cmd_data_gen(config_path: &Path, split: &str, out: &Path) -> anyhow::Result<bool> {
    let config = load_config(config_path)?;
    let (train, val, test) = trigan_core::train::build_datasets(&config.data)?;
    let dataset = match split {
        "train" => train,
        "val" => val,
        "test" => test,
        other => return Err(anyhow!("unknown split `{other}` (expected train|val|test)")),
    };
    let _ = SplitTag::Train;
    let mut rows = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let coords = dataset
            .features
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        rows.push(format!("{coords},{}", dataset.labels[i]));
    }
    write_csv(out, &format!("{},label", feature_header(dataset.dim())), &rows)?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(true)
}

struct Report {
    all_passed: bool,
}

impl Report {
    fn new() -> Self {
        Report { all_passed: true }
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail}");
        if !passed {
            self.all_passed = false;
        }
    }
}

fn cmd_verify_oracle(seeds: u64, out: Option<&Path>) -> anyhow::Result<bool> {
    let mut report = Report::new();
    let alpha = 0.5;

    // closed-form optimal discriminator vs numerical maximization, and
    // maximality against perturbations
    {
        let mut rng = RngStream::new(11, streams::ORACLE);
        let mut max_gap = 0.0f64;
        let mut maximality = true;
        for _ in 0..20 {
            let game = TabularGame::random(4, 3, alpha, &mut rng)?;
            let (pc, pg) = (game.pc_joint(), game.pg_joint());
            let d_star = optimal_discriminator(&game.p, &pc, &pg, alpha);
            let d_num = maximize_discriminator(&game.p, &pc, &pg, alpha, 4000, 4.0);
            max_gap = max_gap.max(d_star.linf_diff(&d_num));
            let u_star =
                trigan_core::oracle::exact_u_with_table(&game.p, &pc, &pg, alpha, &d_star);
            for _ in 0..100 {
                let noise = trigan_core::tensor::Tensor::randn(&[4, 3], 0.3, &mut rng);
                let perturbed: Vec<f64> = d_star
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&dv, &nv)| {
                        let clamped = dv.clamp(1e-9, 1.0 - 1e-9);
                        let logit = (clamped / (1.0 - clamped)).ln();
                        1.0 / (1.0 + (-(logit + nv)).exp())
                    })
                    .collect();
                let table = trigan_core::tensor::Tensor::new(vec![4, 3], perturbed)?;
                let u = trigan_core::oracle::exact_u_with_table(&game.p, &pc, &pg, alpha, &table);
                if u > u_star + 1e-12 {
                    maximality = false;
                }
            }
        }
        report.check(
            "optimal discriminator closed form",
            max_gap < 1e-3 && maximality,
            format!("max |numeric - closed form| = {max_gap:.2e}; maximality held: {maximality}"),
        );
    }

    // value identity at the optimal discriminator
    {
        let mut rng = RngStream::new(12, streams::ORACLE);
        let mut max_diff = 0.0f64;
        for _ in 0..100 {
            let game = TabularGame::random(4, 3, alpha, &mut rng)?;
            let v = exact_v(&game.p, &game.pc_joint(), &game.pg_joint(), alpha);
            max_diff = max_diff.max(v.diff);
        }
        let p = TabularJoint::random(4, 3, &mut rng);
        let at_eq = exact_v(&p, &p, &p, alpha);
        let ln4 = (4.0f64).ln();
        report.check(
            "value identity (-ln 4 + 2 JSD)",
            max_diff < 1e-10 && (at_eq.plug_in + ln4).abs() < 1e-9,
            format!(
                "max identity gap = {max_diff:.2e}; value at p_alpha = p: {:.12}",
                at_eq.plug_in
            ),
        );
    }

    // shared marginals when the mixture matches the data joint
    {
        let mut rng = RngStream::new(13, streams::ORACLE);
        let mut max_gap = 0.0f64;
        for _ in 0..20 {
            let p = TabularJoint::random(4, 3, &mut rng);
            let (pc, pg) = construct_matched_mixture(&p, alpha, &mut rng);
            let pa = mix_alpha(&pc, &pg, alpha);
            max_gap = max_gap.max(p.linf_diff(&pa));
            let (px, py) = p.marginals();
            for joint in [&pc, &pg] {
                let (jx, jy) = joint.marginals();
                for (a, b) in jx.iter().zip(&px) {
                    max_gap = max_gap.max((a - b).abs());
                }
                for (a, b) in jy.iter().zip(&py) {
                    max_gap = max_gap.max((a - b).abs());
                }
            }
        }
        report.check(
            "marginal agreement at p = p_alpha",
            max_gap < 1e-10,
            format!("max marginal gap = {max_gap:.2e}"),
        );
    }

    // pseudo-discriminative loss is KL(p_g || p_c) in gradient and up to a
    // logit-independent constant
    {
        let mut rng = RngStream::new(14, streams::ORACLE);
        let mut max_grad_gap = 0.0f64;
        let mut max_drift = 0.0f64;
        for _ in 0..20 {
            let game = TabularGame::random(4, 3, alpha, &mut rng)?;
            let rep = rp_kl_equivalence_check(&game, &mut rng);
            max_grad_gap = max_grad_gap.max(rep.grad_gap);
            max_drift = max_drift.max(rep.value_gap_drift);
        }
        report.check(
            "pseudo-discriminative loss = KL(p_g || p_c)",
            max_grad_gap < 1e-10 && max_drift < 1e-10,
            format!("max grad gap = {max_grad_gap:.2e}; max value drift = {max_drift:.2e}"),
        );
    }

    // unique equilibrium with the cross-entropy terms; non-uniqueness without
    let mut distance_rows: Vec<String> = Vec::new();
    {
        let mut target_rng = RngStream::new(15, streams::ORACLE);
        let mut max_dist = 0.0f64;
        let mut run_id = 0usize;
        let mut any_mismatch = false;
        for _ in 0..5 {
            let p = TabularJoint::random(4, 3, &mut target_rng);
            for s in 0..seeds {
                let mut rng = RngStream::new(derive_seed(16, s), streams::ORACLE);
                let run = solve_equilibrium(&p, alpha, 0.5, &mut rng, 2000, 0.5)?;
                max_dist = max_dist.max(run.final_dist_c()).max(run.final_dist_g());
                for (round, (dc, dg)) in run.dist_c.iter().zip(&run.dist_g).enumerate() {
                    if round % 50 == 0 {
                        distance_rows.push(format!("{run_id},{round},{dc},{dg}"));
                    }
                }
                run_id += 1;

                let mut rng0 = RngStream::new(derive_seed(17, s), streams::ORACLE);
                let bare = solve_equilibrium(&p, alpha, 0.0, &mut rng0, 6000, 0.5)?;
                if bare.final_mixture_gap() < 1e-3 && bare.final_dist_c() > 0.02 {
                    any_mismatch = true;
                }
            }
        }
        report.check(
            "unique equilibrium with cross-entropy terms",
            max_dist < 0.02,
            format!("max final distance to p = {max_dist:.4}"),
        );
        report.check(
            "non-uniqueness of the bare adversarial game",
            any_mismatch,
            "found a run with p_alpha = p but p_c != p".to_string(),
        );
    }

    // extra divergences leave the equilibrium unchanged
    {
        let mut rng = RngStream::new(18, streams::ORACLE);
        let p = TabularJoint::random(4, 3, &mut rng);
        let rep = regularizer_invariance_check(&p, alpha, 0.5, 0.1, 19, 2000, 0.5)?;
        let worst = rep
            .regularized
            .final_dist_c()
            .max(rep.regularized.final_dist_g());
        report.check(
            "equilibrium invariant to added divergences",
            worst < 0.02,
            format!("max final distance with extra KL = {worst:.4}"),
        );
    }

    // symmetric divergence sanity
    {
        let mut rng = RngStream::new(20, streams::ORACLE);
        let a = TabularJoint::random(4, 3, &mut rng);
        let b = TabularJoint::random(4, 3, &mut rng);
        let sym_gap = (jsd(&a, &b) - jsd(&b, &a)).abs();
        report.check(
            "divergence properties",
            trigan_core::oracle::kl(&a, &a) == 0.0 && sym_gap < 1e-12 && jsd(&a, &b) <= (2f64).ln(),
            format!("kl(q,q) = 0; |jsd(a,b) - jsd(b,a)| = {sym_gap:.2e}"),
        );
    }

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("equilibrium_distances.csv");
        write_csv(&path, "run,round,dist_c,dist_g", &distance_rows)?;
        println!("wrote {}", path.display());
    }

    Ok(report.all_passed)
}

fn parse_widths(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|_| anyhow!("bad width `{w}`")))
        .collect()
}

fn cmd_grad_check(
    batch: usize,
    c_hidden: &str,
    g_hidden: &str,
    d_trunk: &str,
) -> anyhow::Result<bool> {
    use trigan_core::networks::{
        ClassifierParams, DiscVariant, DiscriminatorParams, GeneratorParams, TeacherParams,
        TripleGanModel,
    };
    let (k, d, latent) = (8usize, 2usize, 16usize);
    let mut rng = RngStream::new(2024, streams::INIT);
    let mut c_dims = vec![d];
    c_dims.extend(parse_widths(c_hidden)?);
    c_dims.push(k);
    let classifier = ClassifierParams::init(&c_dims, 0.1, 0.5, &mut rng);
    let generator = GeneratorParams::init(k, latent, &parse_widths(g_hidden)?, d, &mut rng);
    let discriminator = DiscriminatorParams::init(
        DiscVariant::Projection,
        d,
        k,
        &parse_widths(d_trunk)?,
        &mut rng,
    );
    // a teacher slightly apart from the student makes the consistency
    // target nontrivial
    let teacher_net = ClassifierParams::init(&c_dims, 0.1, 0.5, &mut rng);
    let model = TripleGanModel {
        classifier,
        generator,
        discriminator,
        teacher: TeacherParams {
            classifier: teacher_net,
            decay: 0.99,
        },
        dtype: trigan_core::tensor::DType::F64,
    };

    println!(
        "gradient checks: classifier {c_dims:?}, batch {batch}, h = 1e-5, tolerance 1e-4"
    );
    let cases = composite_loss_suite(&model, batch, 1e-5, 99)?;
    let mut ok = true;
    for case in &cases {
        let passed = case.max_rel_err < 1e-4;
        ok &= passed;
        println!(
            "[{}] {}: max relative error {:.3e}",
            if passed { "PASS" } else { "FAIL" },
            case.name,
            case.max_rel_err
        );
    }
    Ok(ok)
}
