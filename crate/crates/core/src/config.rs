//! Run configuration: INI-style text with `[section]` headers, `key = value`
//! lines and `#` comments. Unknown sections or keys are errors, every value
//! is validated before any work starts, and a fully resolved copy can be
//! written back out so a run can always be reproduced from its echo.

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::game::{GenLossVariant, RegularizerKind, Schedule, ScheduleKind};
use crate::networks::DiscVariant;
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mixture,
    Moons,
    Rings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Labeled subset plus unlabeled pool.
    Semi,
    /// Labeled subset only; unlabeled losses disabled.
    LowData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub k: usize,
    pub dim: usize,
    pub radius: f64,
    pub sigma: f64,
    pub n_train_per_class: usize,
    pub n_val_per_class: usize,
    pub n_test_per_class: usize,
    pub labels_per_class: usize,
    pub seed: u64,
    pub regime: Regime,
    pub jitter_sigma: f64,
}

impl DataConfig {
    pub fn augment_policy(&self) -> AugmentPolicy {
        if self.jitter_sigma > 0.0 {
            AugmentPolicy::Jitter {
                sigma: self.jitter_sigma,
            }
        } else {
            AugmentPolicy::None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub c_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub d_trunk: Vec<usize>,
    pub latent_dim: usize,
    pub disc_variant: DiscVariant,
    pub input_noise: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub alpha: f64,
    pub alpha_p_max: f64,
    pub alpha_p_rampup: u64,
    pub alpha_p_start: u64,
    pub alpha_p_kind: ScheduleKind,
    pub alpha_u_max: f64,
    pub alpha_u_rampup: u64,
    pub alpha_u_kind: ScheduleKind,
    pub regularizer: RegularizerKind,
    pub ema_decay: f64,
    pub rho: f64,
    pub m_d: usize,
    pub m_c: usize,
    pub m_g: usize,
    pub gen_loss: GenLossVariant,
}

impl GameConfig {
    pub fn alpha_p_schedule(&self) -> Schedule {
        Schedule {
            kind: self.alpha_p_kind,
            max: self.alpha_p_max,
            rampup: self.alpha_p_rampup,
            start: self.alpha_p_start,
        }
    }

    pub fn alpha_u_schedule(&self) -> Schedule {
        Schedule {
            kind: self.alpha_u_kind,
            max: self.alpha_u_max,
            rampup: self.alpha_u_rampup,
            start: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_c: f64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub beta1_c: f64,
    pub beta1_d: f64,
    pub beta1_g: f64,
    pub beta2_c: f64,
    pub beta2_d: f64,
    pub beta2_g: f64,
    pub eps_c: f64,
    pub eps_d: f64,
    pub eps_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub iters: u64,
    pub pretrain_iters: u64,
    pub checkpoint_interval: u64,
    pub metrics_interval: u64,
    pub out_dir: String,
    pub serial: bool,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub game: GameConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: DataConfig {
                kind: DatasetKind::Mixture,
                k: 8,
                dim: 2,
                radius: 0.75,
                sigma: 0.08,
                n_train_per_class: 250,
                n_val_per_class: 100,
                n_test_per_class: 100,
                labels_per_class: 4,
                seed: 42,
                regime: Regime::Semi,
                jitter_sigma: 0.0,
            },
            model: ModelConfig {
                c_hidden: vec![128, 128],
                g_hidden: vec![128, 128],
                d_trunk: vec![128, 64],
                latent_dim: 16,
                disc_variant: DiscVariant::Projection,
                input_noise: 0.1,
                dropout: 0.5,
            },
            game: GameConfig {
                alpha: 0.5,
                alpha_p_max: 0.3,
                alpha_p_rampup: 200,
                alpha_p_start: 500,
                alpha_p_kind: ScheduleKind::SigmoidRampup,
                alpha_u_max: 1.0,
                alpha_u_rampup: 400,
                alpha_u_kind: ScheduleKind::SigmoidRampup,
                regularizer: RegularizerKind::MeanTeacher,
                ema_decay: 0.99,
                rho: 0.5,
                m_d: 32,
                m_c: 32,
                m_g: 32,
                gen_loss: GenLossVariant::Minimax,
            },
            optim: OptimConfig {
                lr_c: 3e-4,
                lr_d: 3e-4,
                lr_g: 3e-4,
                beta1_c: 0.5,
                beta1_d: 0.5,
                beta1_g: 0.5,
                beta2_c: 0.999,
                beta2_d: 0.999,
                beta2_g: 0.999,
                eps_c: 1e-8,
                eps_d: 1e-8,
                eps_g: 1e-8,
            },
            run: RunConfig {
                iters: 2000,
                pretrain_iters: 200,
                checkpoint_interval: 500,
                metrics_interval: 50,
                out_dir: "runs/out".into(),
                serial: false,
                dtype: DType::F64,
            },
        }
    }
}

fn bad_value(key: &str, constraint: &str) -> Error {
    Error::ConfigValue {
        key: key.into(),
        constraint: constraint.into(),
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse value `{value}` for key `{key}`"),
    })
}

fn parse_usize_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse_scalar::<usize>(key, s.trim(), line))
        .collect()
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("cannot parse boolean `{value}` for key `{key}`"),
        }),
    }
}

impl Config {
    /// Parse config text over the defaults; unknown keys are errors.
    ///
    /// Iteration-count defaults scale with the run length when not set
    /// explicitly: pretrain_iters = 10% of iters, alpha_p_start = 25%,
    /// alpha_p_rampup = 10%, alpha_u_rampup = 20%.
    pub fn parse(text: &str) -> Result<Config> {
        let mut config = Config::default();
        let mut explicit: Vec<(String, String)> = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("malformed section header `{line}`"),
                    });
                };
                section = name.trim().to_string();
                if !["data", "model", "game", "optim", "run"].contains(&section.as_str()) {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("unknown section `[{section}]`"),
                    });
                }
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if section.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("key `{key}` appears before any [section]"),
                });
            }
            config.apply(&section, key, value, line_no)?;
            explicit.push((section.clone(), key.to_string()));
        }
        let was_set =
            |sec: &str, key: &str| explicit.iter().any(|(s, k)| s == sec && k == key);
        if !was_set("run", "pretrain_iters") {
            config.run.pretrain_iters = config.run.iters / 10;
        }
        if !was_set("game", "alpha_p_start") {
            config.game.alpha_p_start = config.run.iters / 4;
        }
        if !was_set("game", "alpha_p_rampup") {
            config.game.alpha_p_rampup = config.run.iters / 10;
        }
        if !was_set("game", "alpha_u_rampup") {
            config.game.alpha_u_rampup = config.run.iters / 5;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let unknown = || Error::Config {
            line,
            msg: format!("unknown key `{key}` in section [{section}]"),
        };
        match section {
            "data" => match key {
                "kind" => {
                    self.data.kind = match value {
                        "mixture" => DatasetKind::Mixture,
                        "moons" => DatasetKind::Moons,
                        "rings" => DatasetKind::Rings,
                        _ => return Err(bad_value("kind", "one of mixture|moons|rings")),
                    }
                }
                "k" => self.data.k = parse_scalar(key, value, line)?,
                "dim" => self.data.dim = parse_scalar(key, value, line)?,
                "radius" => self.data.radius = parse_scalar(key, value, line)?,
                "sigma" => self.data.sigma = parse_scalar(key, value, line)?,
                "n_train_per_class" => {
                    self.data.n_train_per_class = parse_scalar(key, value, line)?
                }
                "n_val_per_class" => self.data.n_val_per_class = parse_scalar(key, value, line)?,
                "n_test_per_class" => self.data.n_test_per_class = parse_scalar(key, value, line)?,
                "labels_per_class" => self.data.labels_per_class = parse_scalar(key, value, line)?,
                "seed" => self.data.seed = parse_scalar(key, value, line)?,
                "regime" => {
                    self.data.regime = match value {
                        "semi" => Regime::Semi,
                        "low_data" => Regime::LowData,
                        _ => return Err(bad_value("regime", "one of semi|low_data")),
                    }
                }
                "jitter_sigma" => self.data.jitter_sigma = parse_scalar(key, value, line)?,
                _ => return Err(unknown()),
            },
            "model" => match key {
                "c_hidden" => self.model.c_hidden = parse_usize_list(key, value, line)?,
                "g_hidden" => self.model.g_hidden = parse_usize_list(key, value, line)?,
                "d_trunk" => self.model.d_trunk = parse_usize_list(key, value, line)?,
                "latent_dim" => self.model.latent_dim = parse_scalar(key, value, line)?,
                "disc_variant" => {
                    self.model.disc_variant = match value {
                        "projection" => DiscVariant::Projection,
                        "concat" => DiscVariant::Concat,
                        _ => return Err(bad_value("disc_variant", "one of projection|concat")),
                    }
                }
                "input_noise" => self.model.input_noise = parse_scalar(key, value, line)?,
                "dropout" => self.model.dropout = parse_scalar(key, value, line)?,
                _ => return Err(unknown()),
            },
            "game" => match key {
                "alpha" => self.game.alpha = parse_scalar(key, value, line)?,
                "alpha_p_max" => self.game.alpha_p_max = parse_scalar(key, value, line)?,
                "alpha_p_rampup" => self.game.alpha_p_rampup = parse_scalar(key, value, line)?,
                "alpha_p_start" => self.game.alpha_p_start = parse_scalar(key, value, line)?,
                "alpha_p_kind" => self.game.alpha_p_kind = parse_schedule_kind(value)?,
                "alpha_u_max" => self.game.alpha_u_max = parse_scalar(key, value, line)?,
                "alpha_u_rampup" => self.game.alpha_u_rampup = parse_scalar(key, value, line)?,
                "alpha_u_kind" => self.game.alpha_u_kind = parse_schedule_kind(value)?,
                "regularizer" => {
                    self.game.regularizer = match value {
                        "none" => RegularizerKind::None,
                        "entropy" => RegularizerKind::Entropy,
                        "consistency" => RegularizerKind::Consistency,
                        "mean_teacher" => RegularizerKind::MeanTeacher,
                        _ => {
                            return Err(bad_value(
                                "regularizer",
                                "one of none|entropy|consistency|mean_teacher",
                            ))
                        }
                    }
                }
                "ema_decay" => self.game.ema_decay = parse_scalar(key, value, line)?,
                "rho" => self.game.rho = parse_scalar(key, value, line)?,
                "m_d" => self.game.m_d = parse_scalar(key, value, line)?,
                "m_c" => self.game.m_c = parse_scalar(key, value, line)?,
                "m_g" => self.game.m_g = parse_scalar(key, value, line)?,
                "gen_loss" => {
                    self.game.gen_loss = match value {
                        "minimax" => GenLossVariant::Minimax,
                        "nonsaturating" => GenLossVariant::NonSaturating,
                        _ => return Err(bad_value("gen_loss", "one of minimax|nonsaturating")),
                    }
                }
                _ => return Err(unknown()),
            },
            "optim" => match key {
                "lr_c" => self.optim.lr_c = parse_scalar(key, value, line)?,
                "lr_d" => self.optim.lr_d = parse_scalar(key, value, line)?,
                "lr_g" => self.optim.lr_g = parse_scalar(key, value, line)?,
                "beta1_c" => self.optim.beta1_c = parse_scalar(key, value, line)?,
                "beta1_d" => self.optim.beta1_d = parse_scalar(key, value, line)?,
                "beta1_g" => self.optim.beta1_g = parse_scalar(key, value, line)?,
                "beta2_c" => self.optim.beta2_c = parse_scalar(key, value, line)?,
                "beta2_d" => self.optim.beta2_d = parse_scalar(key, value, line)?,
                "beta2_g" => self.optim.beta2_g = parse_scalar(key, value, line)?,
                "eps_c" => self.optim.eps_c = parse_scalar(key, value, line)?,
                "eps_d" => self.optim.eps_d = parse_scalar(key, value, line)?,
                "eps_g" => self.optim.eps_g = parse_scalar(key, value, line)?,
                _ => return Err(unknown()),
            },
            "run" => match key {
                "iters" => self.run.iters = parse_scalar(key, value, line)?,
                "pretrain_iters" => self.run.pretrain_iters = parse_scalar(key, value, line)?,
                "checkpoint_interval" => {
                    self.run.checkpoint_interval = parse_scalar(key, value, line)?
                }
                "metrics_interval" => self.run.metrics_interval = parse_scalar(key, value, line)?,
                "out_dir" => self.run.out_dir = value.to_string(),
                "serial" => self.run.serial = parse_bool(key, value, line)?,
                "dtype" => {
                    self.run.dtype = match value {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(bad_value("dtype", "one of f32|f64")),
                    }
                }
                _ => return Err(unknown()),
            },
            _ => unreachable!("sections are validated at the header"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.k < 2 {
            return Err(bad_value("k", "k >= 2"));
        }
        if d.dim < 2 {
            return Err(bad_value("dim", "dim >= 2"));
        }
        if d.sigma < 0.0 || d.radius <= 0.0 {
            return Err(bad_value("sigma/radius", "sigma >= 0 and radius > 0"));
        }
        if d.kind == DatasetKind::Moons && d.k != 2 {
            return Err(bad_value("k", "k = 2 for the moons dataset"));
        }
        if d.kind != DatasetKind::Mixture && d.dim != 2 {
            return Err(bad_value("dim", "dim = 2 for moons and rings"));
        }
        if d.labels_per_class == 0 || d.labels_per_class > d.n_train_per_class {
            return Err(bad_value(
                "labels_per_class",
                "1 <= labels_per_class <= n_train_per_class",
            ));
        }
        if d.n_train_per_class == 0 || d.n_val_per_class == 0 || d.n_test_per_class == 0 {
            return Err(bad_value("n_*_per_class", "all split sizes >= 1"));
        }
        if d.jitter_sigma < 0.0 {
            return Err(bad_value("jitter_sigma", "jitter_sigma >= 0"));
        }

        let m = &self.model;
        if m.c_hidden.is_empty() || m.g_hidden.is_empty() || m.d_trunk.is_empty() {
            return Err(bad_value("c_hidden/g_hidden/d_trunk", "at least one layer"));
        }
        if m.latent_dim == 0 {
            return Err(bad_value("latent_dim", "latent_dim >= 1"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(bad_value("dropout", "dropout in [0, 1)"));
        }
        if m.input_noise < 0.0 {
            return Err(bad_value("input_noise", "input_noise >= 0"));
        }

        let g = &self.game;
        if !(g.alpha > 0.0 && g.alpha < 1.0) {
            return Err(bad_value("alpha", "alpha in (0, 1)"));
        }
        if g.alpha_p_max < 0.0 || g.alpha_u_max < 0.0 {
            return Err(bad_value("alpha_p_max/alpha_u_max", "schedule maxima >= 0"));
        }
        if !(0.0..=1.0).contains(&g.rho) {
            return Err(bad_value("rho", "rho in [0, 1]"));
        }
        if !(0.0..1.0).contains(&g.ema_decay) {
            return Err(bad_value("ema_decay", "ema_decay in [0, 1)"));
        }
        if g.m_d == 0 || g.m_c == 0 || g.m_g == 0 {
            return Err(bad_value("m_d/m_c/m_g", "batch sizes >= 1"));
        }

        let o = &self.optim;
        for (name, v) in [
            ("lr_c", o.lr_c),
            ("lr_d", o.lr_d),
            ("lr_g", o.lr_g),
        ] {
            if v < 0.0 {
                return Err(bad_value(name, "learning rates >= 0"));
            }
        }
        for (name, v) in [
            ("beta1_c", o.beta1_c),
            ("beta1_d", o.beta1_d),
            ("beta1_g", o.beta1_g),
            ("beta2_c", o.beta2_c),
            ("beta2_d", o.beta2_d),
            ("beta2_g", o.beta2_g),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad_value(name, "betas in [0, 1)"));
            }
        }
        for (name, v) in [("eps_c", o.eps_c), ("eps_d", o.eps_d), ("eps_g", o.eps_g)] {
            if v <= 0.0 {
                return Err(bad_value(name, "eps > 0"));
            }
        }

        let r = &self.run;
        if r.iters == 0 {
            return Err(bad_value("iters", "iters >= 1"));
        }
        if r.pretrain_iters > r.iters {
            return Err(bad_value("pretrain_iters", "pretrain_iters <= iters"));
        }
        if r.checkpoint_interval == 0 || r.metrics_interval == 0 {
            return Err(bad_value(
                "checkpoint_interval/metrics_interval",
                "intervals >= 1",
            ));
        }
        Ok(())
    }

    /// Canonical text with every value resolved; parsing it reproduces this
    /// config exactly.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let g = &self.game;
        let o = &self.optim;
        let r = &self.run;
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "[data]\n\
             kind = {}\n\
             k = {}\n\
             dim = {}\n\
             radius = {}\n\
             sigma = {}\n\
             n_train_per_class = {}\n\
             n_val_per_class = {}\n\
             n_test_per_class = {}\n\
             labels_per_class = {}\n\
             seed = {}\n\
             regime = {}\n\
             jitter_sigma = {}\n\
             \n[model]\n\
             c_hidden = {}\n\
             g_hidden = {}\n\
             d_trunk = {}\n\
             latent_dim = {}\n\
             disc_variant = {}\n\
             input_noise = {}\n\
             dropout = {}\n\
             \n[game]\n\
             alpha = {}\n\
             alpha_p_max = {}\n\
             alpha_p_rampup = {}\n\
             alpha_p_start = {}\n\
             alpha_p_kind = {}\n\
             alpha_u_max = {}\n\
             alpha_u_rampup = {}\n\
             alpha_u_kind = {}\n\
             regularizer = {}\n\
             ema_decay = {}\n\
             rho = {}\n\
             m_d = {}\n\
             m_c = {}\n\
             m_g = {}\n\
             gen_loss = {}\n\
             \n[optim]\n\
             lr_c = {}\nlr_d = {}\nlr_g = {}\n\
             beta1_c = {}\nbeta1_d = {}\nbeta1_g = {}\n\
             beta2_c = {}\nbeta2_d = {}\nbeta2_g = {}\n\
             eps_c = {}\neps_d = {}\neps_g = {}\n\
             \n[run]\n\
             iters = {}\n\
             pretrain_iters = {}\n\
             checkpoint_interval = {}\n\
             metrics_interval = {}\n\
             out_dir = {}\n\
             serial = {}\n\
             dtype = {}\n",
            match d.kind {
                DatasetKind::Mixture => "mixture",
                DatasetKind::Moons => "moons",
                DatasetKind::Rings => "rings",
            },
            d.k,
            d.dim,
            d.radius,
            d.sigma,
            d.n_train_per_class,
            d.n_val_per_class,
            d.n_test_per_class,
            d.labels_per_class,
            d.seed,
            match d.regime {
                Regime::Semi => "semi",
                Regime::LowData => "low_data",
            },
            d.jitter_sigma,
            list(&m.c_hidden),
            list(&m.g_hidden),
            list(&m.d_trunk),
            m.latent_dim,
            match m.disc_variant {
                DiscVariant::Projection => "projection",
                DiscVariant::Concat => "concat",
            },
            m.input_noise,
            m.dropout,
            g.alpha,
            g.alpha_p_max,
            g.alpha_p_rampup,
            g.alpha_p_start,
            schedule_kind_name(g.alpha_p_kind),
            g.alpha_u_max,
            g.alpha_u_rampup,
            schedule_kind_name(g.alpha_u_kind),
            match g.regularizer {
                RegularizerKind::None => "none",
                RegularizerKind::Entropy => "entropy",
                RegularizerKind::Consistency => "consistency",
                RegularizerKind::MeanTeacher => "mean_teacher",
            },
            g.ema_decay,
            g.rho,
            g.m_d,
            g.m_c,
            g.m_g,
            match g.gen_loss {
                GenLossVariant::Minimax => "minimax",
                GenLossVariant::NonSaturating => "nonsaturating",
            },
            o.lr_c,
            o.lr_d,
            o.lr_g,
            o.beta1_c,
            o.beta1_d,
            o.beta1_g,
            o.beta2_c,
            o.beta2_d,
            o.beta2_g,
            o.eps_c,
            o.eps_d,
            o.eps_g,
            r.iters,
            r.pretrain_iters,
            r.checkpoint_interval,
            r.metrics_interval,
            r.out_dir,
            r.serial,
            match r.dtype {
                DType::F32 => "f32",
                DType::F64 => "f64",
            },
        )
    }
}

fn parse_schedule_kind(value: &str) -> Result<ScheduleKind> {
    match value {
        "constant" => Ok(ScheduleKind::Constant),
        "sigmoid" => Ok(ScheduleKind::SigmoidRampup),
        _ => Err(bad_value("schedule kind", "one of constant|sigmoid")),
    }
}

fn schedule_kind_name(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::Constant => "constant",
        ScheduleKind::SigmoidRampup => "sigmoid",
    }
}
