//! Run orchestration: config to datasets, model and trainer; the full
//! training loop with metrics logging and checkpointing; checkpoint
//! save/restore with bitwise-identical continuation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adam::AdamConfig;
use crate::checkpoint::Container;
use crate::config::{Config, DataConfig, DatasetKind, Regime};
use crate::data::{make_mixture, make_moons, make_rings, split_semi, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{error_rate, MetricsRow, METRICS_HEADER};
use crate::game::{GameHyperparams, OptimSettings, Trainer};
use crate::networks::{
    ClassifierParams, DiscriminatorParams, GeneratorParams, TeacherParams, TripleGanModel,
};
use crate::rng::{derive_seed, streams, RngStream};
use crate::tensor::DType;

/// Train/val/test datasets generated from the data section.
pub fn build_datasets(cfg: &DataConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let gen = |n, tag| -> Result<Dataset> {
        match cfg.kind {
            DatasetKind::Mixture => {
                make_mixture(cfg.k, n, cfg.radius, cfg.sigma, cfg.dim, cfg.seed, tag)
            }
            DatasetKind::Moons => make_moons(n, cfg.sigma, cfg.seed, tag),
            DatasetKind::Rings => make_rings(cfg.k, n, cfg.sigma, cfg.seed, tag),
        }
    };
    Ok((
        gen(cfg.n_train_per_class, SplitTag::Train)?,
        gen(cfg.n_val_per_class, SplitTag::Val)?,
        gen(cfg.n_test_per_class, SplitTag::Test)?,
    ))
}

/// Fresh model with the configured widths, seeded from the data seed.
pub fn build_model(cfg: &Config) -> TripleGanModel {
    let mut rng = RngStream::new(derive_seed(cfg.data.seed, 9001), streams::INIT);
    let k = cfg.data.k;
    let d = cfg.data.dim;
    let mut c_dims = vec![d];
    c_dims.extend_from_slice(&cfg.model.c_hidden);
    c_dims.push(k);
    let classifier = ClassifierParams::init(
        &c_dims,
        cfg.model.input_noise,
        cfg.model.dropout,
        &mut rng,
    );
    let generator =
        GeneratorParams::init(k, cfg.model.latent_dim, &cfg.model.g_hidden, d, &mut rng);
    let discriminator =
        DiscriminatorParams::init(cfg.model.disc_variant, d, k, &cfg.model.d_trunk, &mut rng);
    let teacher = TeacherParams::from_student(&classifier, cfg.game.ema_decay);
    let mut model = TripleGanModel {
        classifier,
        generator,
        discriminator,
        teacher,
        dtype: cfg.run.dtype,
    };
    if cfg.run.dtype == DType::F32 {
        retag_model(&mut model, DType::F32);
    }
    model
}

fn retag_model(model: &mut TripleGanModel, dtype: DType) {
    let retag = |ts: Vec<&mut crate::tensor::Tensor>| {
        for t in ts {
            let rounded = std::mem::replace(t, crate::tensor::Tensor::scalar(0.0))
                .with_dtype(dtype);
            *t = rounded;
        }
    };
    retag(model.classifier.flat_mut());
    retag(model.generator.flat_mut());
    retag(model.discriminator.flat_mut());
    retag(model.teacher.classifier.flat_mut());
}

pub fn game_hyperparams(cfg: &Config) -> GameHyperparams {
    GameHyperparams {
        alpha: cfg.game.alpha,
        alpha_p: cfg.game.alpha_p_schedule(),
        alpha_u: cfg.game.alpha_u_schedule(),
        m_d: cfg.game.m_d,
        m_c: cfg.game.m_c,
        m_g: cfg.game.m_g,
        regularizer: cfg.game.regularizer,
        ema_decay: cfg.game.ema_decay,
        gen_loss: cfg.game.gen_loss,
        rho: cfg.game.rho,
        total_iters: cfg.run.iters,
        pretrain_iters: cfg.run.pretrain_iters,
    }
}

pub fn optim_settings(cfg: &Config) -> OptimSettings {
    let o = &cfg.optim;
    OptimSettings {
        classifier: AdamConfig {
            lr: o.lr_c,
            beta1: o.beta1_c,
            beta2: o.beta2_c,
            eps: o.eps_c,
        },
        discriminator: AdamConfig {
            lr: o.lr_d,
            beta1: o.beta1_d,
            beta2: o.beta2_d,
            eps: o.eps_d,
        },
        generator: AdamConfig {
            lr: o.lr_g,
            beta1: o.beta1_g,
            beta2: o.beta2_g,
            eps: o.eps_g,
        },
    }
}

/// Trainer plus the validation and test datasets for a config.
pub fn build_trainer(cfg: &Config) -> Result<(Trainer, Dataset, Dataset)> {
    let (train, val, test) = build_datasets(&cfg.data)?;
    let split = split_semi(&train, cfg.data.labels_per_class, cfg.data.seed)?;
    let split = match cfg.data.regime {
        Regime::Semi => split,
        Regime::LowData => split.without_unlabeled(),
    };
    let model = build_model(cfg);
    let trainer = Trainer::new(
        model,
        game_hyperparams(cfg),
        optim_settings(cfg),
        train,
        split,
        cfg.data.seed,
    )?;
    Ok((trainer, val, test))
}

// ---------------------------------------------------------------------------
// Checkpoint encode/decode
// ---------------------------------------------------------------------------

fn push_player(c: &mut Container, prefix: &str, names: &[String], tensors: &[&crate::tensor::Tensor]) {
    for (name, t) in names.iter().zip(tensors) {
        c.push(format!("{prefix}/{name}"), (*t).clone());
    }
}

fn restore_player(
    c: &Container,
    prefix: &str,
    names: &[String],
    tensors: Vec<&mut crate::tensor::Tensor>,
) -> Result<()> {
    for (name, t) in names.iter().zip(tensors) {
        let key = format!("{prefix}/{name}");
        let stored = c.require(&key)?;
        if stored.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "entry `{key}` has shape {:?}, expected {:?}",
                stored.shape(),
                t.shape()
            )));
        }
        *t = stored.clone();
    }
    Ok(())
}

fn push_adam(c: &mut Container, prefix: &str, names: &[String], state: &crate::adam::AdamState) {
    c.push_u64(format!("{prefix}/t"), state.t);
    for (name, (m, v)) in names.iter().zip(&state.moments) {
        c.push(format!("{prefix}/{name}/m"), m.clone());
        c.push(format!("{prefix}/{name}/v"), v.clone());
    }
}

fn restore_adam(
    c: &Container,
    prefix: &str,
    names: &[String],
    state: &mut crate::adam::AdamState,
) -> Result<()> {
    state.t = c.require_u64(&format!("{prefix}/t"))?;
    for (name, (m, v)) in names.iter().zip(state.moments.iter_mut()) {
        *m = c.require(&format!("{prefix}/{name}/m"))?.clone();
        *v = c.require(&format!("{prefix}/{name}/v"))?.clone();
    }
    Ok(())
}

/// Encode the full training state plus the resolved config text.
pub fn encode_checkpoint(trainer: &Trainer, config: &Config) -> Container {
    let mut c = Container::new();
    let model = &trainer.model;
    let c_names = model.classifier.param_names();
    let g_names = model.generator.param_names();
    let d_names = model.discriminator.param_names();
    push_player(&mut c, "c", &c_names, &model.classifier.flat());
    push_player(&mut c, "g", &g_names, &model.generator.flat());
    push_player(&mut c, "d", &d_names, &model.discriminator.flat());
    push_player(&mut c, "t", &c_names, &model.teacher.classifier.flat());
    push_adam(&mut c, "adam_c", &c_names, &trainer.adam_c);
    push_adam(&mut c, "adam_g", &g_names, &trainer.adam_g);
    push_adam(&mut c, "adam_d", &d_names, &trainer.adam_d);
    c.push_u64("run/iter", trainer.iter);
    c.push_u64("run/base_seed", trainer.base_seed);
    c.push_bytes("meta/config", config.to_text().as_bytes());
    c
}

/// Restore a container into a freshly built trainer (shapes must match the
/// embedded config, which is how the trainer should have been built).
pub fn restore_checkpoint(trainer: &mut Trainer, c: &Container) -> Result<()> {
    let c_names = trainer.model.classifier.param_names();
    let g_names = trainer.model.generator.param_names();
    let d_names = trainer.model.discriminator.param_names();
    restore_player(c, "c", &c_names, trainer.model.classifier.flat_mut())?;
    restore_player(c, "g", &g_names, trainer.model.generator.flat_mut())?;
    restore_player(c, "d", &d_names, trainer.model.discriminator.flat_mut())?;
    restore_player(c, "t", &c_names, trainer.model.teacher.classifier.flat_mut())?;
    restore_adam(c, "adam_c", &c_names, &mut trainer.adam_c)?;
    restore_adam(c, "adam_g", &g_names, &mut trainer.adam_g)?;
    restore_adam(c, "adam_d", &d_names, &mut trainer.adam_d)?;
    let iter = c.require_u64("run/iter")?;
    let seed = c.require_u64("run/base_seed")?;
    if seed != trainer.base_seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with seed {seed}, trainer has {}",
            trainer.base_seed
        )));
    }
    trainer.seek_to_iter(iter);
    Ok(())
}

/// The config embedded in a checkpoint file.
pub fn config_from_checkpoint(container: &Container) -> Result<Config> {
    let bytes = container.require_bytes("meta/config")?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Checkpoint("embedded config is not utf-8".into()))?;
    Config::parse(&text)
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

pub struct RunOutput {
    pub trainer: Trainer,
    pub val: Dataset,
    pub test: Dataset,
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub last_row: Option<MetricsRow>,
}

/// Execute a full run from scratch under `config`.
pub fn run_training(config: &Config) -> Result<RunOutput> {
    let (trainer, val, test) = build_trainer(config)?;
    run_loop(trainer, val, test, config)
}

/// Continue a checkpointed run to its configured end. The embedded config
/// drives everything except the output directory, which may be overridden.
pub fn resume_training(checkpoint: &Path, out_dir: Option<&str>) -> Result<RunOutput> {
    let container = Container::load(checkpoint)?;
    let mut config = config_from_checkpoint(&container)?;
    if let Some(dir) = out_dir {
        config.run.out_dir = dir.to_string();
    }
    let (mut trainer, val, test) = build_trainer(&config)?;
    restore_checkpoint(&mut trainer, &container)?;
    run_loop(trainer, val, test, &config)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run_loop(
    mut trainer: Trainer,
    val: Dataset,
    test: Dataset,
    config: &Config,
) -> Result<RunOutput> {
    let out_dir = PathBuf::from(&config.run.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    // echo the fully resolved config so the run can be reproduced
    write_file(&out_dir.join("config_resolved.ini"), &config.to_text())?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    writeln!(metrics_file, "{METRICS_HEADER}")
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let total = config.run.iters;
    let mut last_row = None;
    let mut interval_clock = Instant::now();
    while trainer.iter < total {
        let metrics = trainer.step()?;
        let done = trainer.iter; // steps completed

        if done % config.run.metrics_interval == 0 || done == total {
            let err_student = error_rate(&trainer.model.classifier, &val)?;
            let err_teacher = error_rate(&trainer.model.teacher.classifier, &val)?;
            let time_ms = if config.run.serial {
                0
            } else {
                interval_clock.elapsed().as_millis() as u64
            };
            interval_clock = Instant::now();
            let row = MetricsRow {
                iter: done,
                loss_d: metrics.loss_d,
                loss_g: metrics.loss_g,
                loss_c_adv: metrics.c_parts.adv,
                r_c: metrics.c_parts.r_c,
                r_p: metrics.c_parts.r_p,
                r_u: metrics.c_parts.r_u,
                err_val_student: err_student,
                err_val_teacher: err_teacher,
                alpha_p_eff: metrics.alpha_p_eff,
                alpha_u_eff: metrics.alpha_u_eff,
                time_ms,
            };
            writeln!(metrics_file, "{}", row.to_csv_line())
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            metrics_file
                .flush()
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            last_row = Some(row);
        }

        if done % config.run.checkpoint_interval == 0 && done < total {
            let path = out_dir.join(format!("checkpoint_{done}.tgan"));
            encode_checkpoint(&trainer, config).save(&path)?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint_final.tgan");
    encode_checkpoint(&trainer, config).save(&final_checkpoint)?;

    Ok(RunOutput {
        trainer,
        val,
        test,
        out_dir,
        metrics_path,
        final_checkpoint,
        last_row,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(out_dir: &Path) -> Config {
        let text = format!(
            "[data]\nk = 4\nn_train_per_class = 40\nn_val_per_class = 10\nn_test_per_class = 10\n\
             labels_per_class = 4\nseed = 7\n\
             [model]\nc_hidden = 16,16\ng_hidden = 16,16\nd_trunk = 16,8\nlatent_dim = 4\n\
             [game]\nm_d = 8\nm_c = 8\nm_g = 8\n\
             [run]\niters = 30\npretrain_iters = 5\ncheckpoint_interval = 10\nmetrics_interval = 5\n\
             serial = true\nout_dir = {}\n",
            out_dir.display()
        );
        Config::parse(&text).unwrap()
    }

    #[test]
    fn run_writes_expected_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(&dir.path().join("run1"));
        let out = run_training(&cfg).unwrap();
        assert!(out.metrics_path.exists());
        assert!(out.final_checkpoint.exists());
        assert!(out.out_dir.join("config_resolved.ini").exists());
        assert!(out.out_dir.join("checkpoint_10.tgan").exists());
        assert!(out.out_dir.join("checkpoint_20.tgan").exists());
        assert_eq!(out.trainer.iter, 30);
        let row = out.last_row.unwrap();
        assert_eq!(row.iter, 30);
        assert_eq!(row.time_ms, 0); // serial mode
    }

    #[test]
    fn serial_runs_are_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_a = small_config(&dir.path().join("a"));
        let cfg_b = small_config(&dir.path().join("b"));
        let a = run_training(&cfg_a).unwrap();
        let b = run_training(&cfg_b).unwrap();
        let csv_a = std::fs::read(&a.metrics_path).unwrap();
        let csv_b = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(csv_a, csv_b);
        // all parameters identical too
        for (x, y) in a
            .trainer
            .model
            .classifier
            .flat()
            .iter()
            .zip(b.trainer.model.classifier.flat())
        {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let full_cfg = small_config(&dir.path().join("full"));
        let full = run_training(&full_cfg).unwrap();

        let resumed = resume_training(
            &dir.path().join("full").join("checkpoint_10.tgan"),
            Some(dir.path().join("resumed").to_str().unwrap()),
        )
        .unwrap();

        // final parameters agree bitwise
        for (x, y) in full
            .trainer
            .model
            .classifier
            .flat()
            .iter()
            .zip(resumed.trainer.model.classifier.flat())
        {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in full
            .trainer
            .model
            .generator
            .flat()
            .iter()
            .zip(resumed.trainer.model.generator.flat())
        {
            assert_eq!(x.data(), y.data());
        }

        // the resumed metrics tail matches the uninterrupted run's rows
        let full_csv = std::fs::read_to_string(&full.metrics_path).unwrap();
        let res_csv = std::fs::read_to_string(&resumed.metrics_path).unwrap();
        let full_rows: Vec<&str> = full_csv.lines().skip(1).collect();
        let res_rows: Vec<&str> = res_csv.lines().skip(1).collect();
        assert_eq!(&full_rows[full_rows.len() - res_rows.len()..], &res_rows[..]);
    }

    #[test]
    fn checkpoint_embeds_parseable_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(&dir.path().join("run"));
        let out = run_training(&cfg).unwrap();
        let container = Container::load(&out.final_checkpoint).unwrap();
        let embedded = config_from_checkpoint(&container).unwrap();
        assert_eq!(embedded, cfg);
    }

    #[test]
    fn echoed_config_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(&dir.path().join("one"));
        let out = run_training(&cfg).unwrap();
        let echo = std::fs::read_to_string(out.out_dir.join("config_resolved.ini")).unwrap();
        let mut cfg2 = Config::parse(&echo).unwrap();
        cfg2.run.out_dir = dir.path().join("two").display().to_string();
        let out2 = run_training(&cfg2).unwrap();
        let csv1 = std::fs::read_to_string(&out.metrics_path).unwrap();
        let csv2 = std::fs::read_to_string(&out2.metrics_path).unwrap();
        assert_eq!(csv1, csv2);
    }

    #[test]
    fn f32_mode_trains_and_checkpoints_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(&dir.path().join("f32"));
        cfg.run.dtype = DType::F32;
        let out = run_training(&cfg).unwrap();
        // every parameter is representable in f32
        for t in out.trainer.model.classifier.flat() {
            for &v in t.data() {
                assert_eq!(v, v as f32 as f64);
            }
        }
        // and survives a checkpoint round trip bitwise
        let container = Container::load(&out.final_checkpoint).unwrap();
        let stored = container.require("c/0/w").unwrap();
        assert_eq!(stored.dtype(), DType::F32);
        for (a, b) in stored
            .data()
            .iter()
            .zip(out.trainer.model.classifier.flat()[0].data())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
