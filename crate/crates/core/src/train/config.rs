use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scenegen::parse_kv;

/// Everything that shapes a fitting run. Each field is a named key in the text format.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Steps before this train only the deformation net.
    pub early_end: usize,
    pub separation_at: usize,
    pub filter_at: usize,
    pub filter_every: usize,
    pub eval_every: usize,
    pub tau_var: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub tau_prune: f64,
    pub lambda: f64,
    pub modes: usize,
    pub k: usize,
    pub alpha0: f64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_feature: f64,
    pub lr_beta: f64,
    pub tv_weight: f64,
    /// Uniform noise added to hidden weights when motion modes are seeded from the
    /// deformation net.
    pub mode_noise: f64,
    pub feature_init: f64,
    pub sh_degree: usize,
    pub separation: bool,
    pub physical_opacity: bool,
    pub seed: u64,
}

macro_rules! config_keys {
    ($($name:ident),* $(,)?) => {
        pub const CONFIG_KEYS: &[&str] = &[$(stringify!($name)),*];

        impl TrainConfig {
            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.trim().parse().map_err(|_| {
                            Error::Config(format!("bad value for {key}: '{value}'"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            /// Fully resolved `key = value` listing in a fixed order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($name), self.$name));)*
                s
            }
        }
    };
}

config_keys!(
    total_steps,
    early_end,
    separation_at,
    filter_at,
    filter_every,
    eval_every,
    tau_var,
    epsilon,
    gamma,
    tau_prune,
    lambda,
    modes,
    k,
    alpha0,
    lr_init,
    lr_final,
    lr_position_init,
    lr_position_final,
    lr_rotation,
    lr_scale,
    lr_opacity,
    lr_color,
    lr_feature,
    lr_beta,
    tv_weight,
    mode_noise,
    feature_init,
    sh_degree,
    separation,
    physical_opacity,
    seed,
);

pub const PRESETS: &[&str] = &["mini", "paper-shape"];

impl TrainConfig {
    /// 2000 steps with milestones at 40/80/267. The network learning rates are raised over the
    /// long-run schedule to make up for the short run.
    pub fn mini() -> TrainConfig {
        TrainConfig {
            total_steps: 2000,
            early_end: 40,
            separation_at: 80,
            filter_at: 267,
            filter_every: 100,
            eval_every: 100,
            tau_var: 0.01,
            epsilon: 1.0,
            gamma: 0.5,
            tau_prune: 0.02,
            lambda: 0.1,
            modes: 4,
            k: 8,
            alpha0: 1.0,
            lr_init: 5e-3,
            lr_final: 1e-5,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 0.005,
            lr_color: 2.5e-3,
            lr_feature: 2.5e-3,
            lr_beta: 1e-2,
            tv_weight: 1e-3,
            mode_noise: 1e-3,
            feature_init: 0.1,
            sh_degree: 0,
            separation: true,
            physical_opacity: true,
            seed: 0,
        }
    }

    /// Same thresholds with the full-length 150k step schedule.
    pub fn paper_shape() -> TrainConfig {
        TrainConfig {
            total_steps: 150_000,
            early_end: 3000,
            separation_at: 6000,
            filter_at: 20_000,
            filter_every: 1000,
            eval_every: 5000,
            lr_init: 8e-4,
            lr_final: 1.6e-6,
            lr_opacity: 0.05,
            ..TrainConfig::mini()
        }
    }

    pub fn preset(name: &str) -> Result<TrainConfig> {
        match name {
            "mini" => Ok(TrainConfig::mini()),
            "paper-shape" => Ok(TrainConfig::paper_shape()),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}' (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Applies every entry of `map` on top of `self`.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = base;
        c.apply(&parse_kv(text, "config")?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.early_end < self.separation_at
            && self.separation_at < self.filter_at
            && self.filter_at <= self.total_steps)
        {
            return fail("milestones must satisfy early_end < separation_at < filter_at <= total_steps");
        }
        let positive = [
            ("tau_var", self.tau_var),
            ("epsilon", self.epsilon),
            ("gamma", self.gamma),
            ("tau_prune", self.tau_prune),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.modes == 0 || self.k == 0 || self.filter_every == 0 || self.eval_every == 0 {
            return fail("modes, k, filter_every and eval_every must be at least 1");
        }
        if self.sh_degree > 1 {
            return fail("sh_degree must be 0 or 1");
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return fail("alpha0 must lie in [0, 1]");
        }
        let rates = [
            self.lr_init,
            self.lr_final,
            self.lr_position_init,
            self.lr_position_final,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_color,
            self.lr_feature,
            self.lr_beta,
            self.tv_weight,
            self.mode_noise,
            self.feature_init,
        ];
        if rates.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return fail("learning rates and weights must be finite and non-negative");
        }
        if self.lr_init <= 0.0 || self.lr_final <= 0.0 || self.lr_position_init <= 0.0 || self.lr_position_final <= 0.0
        {
            return fail("scheduled learning rates must be positive");
        }
        Ok(())
    }
}
