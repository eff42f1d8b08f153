//! Config-driven model construction and the training runs used by the CLI
//! and the acceptance suite.

use std::fmt;

use tnn_core::controller::{controller_spec, ActionSet, ControllerPolicy, RewardConfig};
use tnn_core::gating::{Discretization, Ordering, USampling};
use tnn_core::objectives::{BernoulliGatePolicy, PenaltyConfig, PenaltyForm, PolicyInput};
use tnn_core::rng::derived;
use tnn_core::tmodule::{c3d_w_style, resnet_d, vgg_w, ArchSpec, LayerSpec, TNetwork};
use tnn_core::trainer::{GateLearner, TrainConfig};

use crate::config::{Config, ConfigError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    VggW,
    C3dW,
    ResnetD,
}

impl std::str::FromStr for ArchKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "vgg_w" => Ok(ArchKind::VggW),
            "c3d_w" => Ok(ArchKind::C3dW),
            "resnet_d" => Ok(ArchKind::ResnetD),
            _ => Err(()),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::VggW => "vgg_w",
            ArchKind::C3dW => "c3d_w",
            ArchKind::ResnetD => "resnet_d",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub width: usize,
    pub groups: usize,
    pub ordering: Ordering,
    pub stages: Vec<usize>,
    pub discretization: Discretization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchKind::VggW,
            width: 16,
            groups: 8,
            ordering: Ordering::Nested,
            stages: vec![2, 2],
            discretization: Discretization::Floor,
        }
    }
}

fn invalid(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        expected,
    }
}

fn enum_key<T>(
    cfg: &Config,
    key: &str,
    default: T,
    expected: &'static str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<T, ConfigError> {
    match cfg.get_str(key) {
        None => Ok(default),
        Some(v) => parse(v).ok_or_else(|| invalid(key, v, expected)),
    }
}

impl ModelConfig {
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let d = ModelConfig::default();
        let stages = match cfg.get_str("model.stages") {
            None => d.stages,
            Some(s) => s
                .split(',')
                .map(|t| t.trim().parse().ok().filter(|&n: &usize| n > 0))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| invalid("model.stages", s, "comma-separated positive integers"))?,
        };
        Ok(ModelConfig {
            arch: enum_key(cfg, "model.arch", d.arch, "vgg_w, c3d_w or resnet_d", |s| {
                s.parse().ok()
            })?,
            width: cfg.get_or("model.width", d.width, "integer")?,
            groups: cfg.get_or("model.groups", d.groups, "integer")?,
            ordering: enum_key(
                cfg,
                "model.ordering",
                d.ordering,
                "nested or independent",
                |s| match s {
                    "nested" => Some(Ordering::Nested),
                    "independent" => Some(Ordering::Independent),
                    _ => None,
                },
            )?,
            stages,
            discretization: enum_key(
                cfg,
                "model.discretization",
                d.discretization,
                "floor or ceiling",
                |s| match s {
                    "floor" => Some(Discretization::Floor),
                    "ceiling" => Some(Discretization::Ceiling),
                    _ => None,
                },
            )?,
        })
    }

    pub fn spec(&self, input: &[usize], classes: usize) -> ArchSpec {
        let mut spec = match self.arch {
            ArchKind::VggW => vgg_w(input, self.width, self.groups, classes, self.ordering),
            ArchKind::C3dW => c3d_w_style(input, self.groups, classes),
            ArchKind::ResnetD => resnet_d(input, self.width, &self.stages, classes),
        };
        for l in &mut spec.layers {
            if let LayerSpec::Gated(m) = l {
                m.discretization = self.discretization;
            }
        }
        spec
    }

    pub fn build(&self, input: &[usize], classes: usize, seed: u64) -> tnn_core::Result<TNetwork> {
        TNetwork::build(&self.spec(input, classes), &mut derived(seed, 100))
    }
}

pub fn train_config(cfg: &Config) -> Result<TrainConfig, ConfigError> {
    let d = TrainConfig::default();
    let u_sampling = match cfg.get_str("train.u_sampling").unwrap_or("uniform") {
        "uniform" => USampling::Uniform,
        "incremental" => USampling::Incremental {
            start: cfg.get_or("train.u_start", 0.1, "number")?,
            step: cfg.get_or("train.u_step", 0.1, "number")?,
            period: cfg.get_or("train.u_period", 2, "integer")?,
        },
        "fixed" => USampling::Fixed(cfg.get_or("train.u_fixed", 1.0, "number")?),
        other => return Err(invalid("train.u_sampling", other, "uniform, incremental or fixed")),
    };
    let pd = PenaltyConfig::default();
    Ok(TrainConfig {
        epochs: cfg.get_or("train.epochs", d.epochs, "integer")?,
        epochs_phase2: cfg.get_or("phase2.epochs", d.epochs_phase2, "integer")?,
        lr_datapath: cfg.get_or("train.lr", d.lr_datapath, "number")?,
        lr_phase2: cfg.get_or("phase2.lr", d.lr_phase2, "number")?,
        batch_size: cfg.get_or("train.batch_size", d.batch_size, "integer")?,
        seed: cfg.get_or("train.seed", d.seed, "integer")?,
        u_sampling,
        penalty: PenaltyConfig {
            form: enum_key(cfg, "penalty.form", pd.form, "hinge or dist", |s| match s {
                "hinge" => Some(PenaltyForm::Hinge),
                "dist" => Some(PenaltyForm::Dist),
                _ => None,
            })?,
            p: cfg.get_or("penalty.p", pd.p, "1 or 2")?,
            lambda: cfg.get_or("penalty.lambda", pd.lambda, "number")?,
        },
        gate_learner: enum_key(
            cfg,
            "gates.learner",
            d.gate_learner,
            "reinforce or concrete",
            |s| match s {
                "reinforce" => Some(GateLearner::Reinforce),
                "concrete" => Some(GateLearner::Concrete),
                _ => None,
            },
        )?,
        reward: RewardConfig {
            gamma1: cfg.get_or("reward.gamma1", d.reward.gamma1, "number")?,
            gamma2: cfg.get_or("reward.gamma2", d.reward.gamma2, "number")?,
        },
    })
}

pub fn gate_policy(cfg: &Config, net: &TNetwork, seed: u64) -> Result<BernoulliGatePolicy, ConfigError> {
    let input = enum_key(
        cfg,
        "gates.input",
        PolicyInput::Contextual,
        "blind or contextual",
        |s| match s {
            "blind" => Some(PolicyInput::Blind),
            "contextual" => Some(PolicyInput::Contextual),
            _ => None,
        },
    )?;
    let hidden = cfg.get_or("gates.hidden", 16, "integer")?;
    let features = net.input_shape().iter().product();
    BernoulliGatePolicy::new(input, &net.module_sizes(), features, hidden, &mut derived(seed, 200))
        .map_err(|e| invalid("gates", &e.to_string(), "a buildable gate policy"))
}

pub fn controller(cfg: &Config, net: &TNetwork, seed: u64) -> Result<ControllerPolicy, ConfigError> {
    let k = cfg.get_or("controller.actions", 10, "integer")?;
    let actions =
        ActionSet::uniform(k).map_err(|_| invalid("controller.actions", &k.to_string(), "a positive action count"))?;
    let cnet = TNetwork::build(&controller_spec(net.input_shape(), k), &mut derived(seed, 300))
        .map_err(|e| invalid("controller", &e.to_string(), "a buildable controller"))?;
    ControllerPolicy::new(cnet, actions).map_err(|e| invalid("controller", &e.to_string(), "a valid controller"))
}

/// Every key a run config may contain.
pub const RUN_KEYS: &[&str] = &[
    "data.dir",
    "model.arch",
    "model.width",
    "model.groups",
    "model.ordering",
    "model.stages",
    "model.discretization",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.seed",
    "train.u_sampling",
    "train.u_start",
    "train.u_step",
    "train.u_period",
    "train.u_fixed",
    "phase2.epochs",
    "phase2.lr",
    "penalty.form",
    "penalty.p",
    "penalty.lambda",
    "gates.learner",
    "gates.input",
    "gates.hidden",
    "controller.actions",
    "reward.gamma1",
    "reward.gamma2",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_config() {
        let cfg = Config::default();
        assert_eq!(ModelConfig::from_config(&cfg).unwrap(), ModelConfig::default());
        let t = train_config(&cfg).unwrap();
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn parses_every_section() {
        let cfg = Config::parse(
            "model.arch = resnet_d\nmodel.stages = 1,2\nmodel.ordering = independent\nmodel.discretization = ceiling\n\
             train.u_sampling = incremental\ntrain.u_period = 3\npenalty.form = hinge\ngates.learner = concrete\n",
        )
        .unwrap();
        let m = ModelConfig::from_config(&cfg).unwrap();
        assert_eq!(m.arch, ArchKind::ResnetD);
        assert_eq!(m.stages, vec![1, 2]);
        assert_eq!(m.discretization, Discretization::Ceiling);
        let t = train_config(&cfg).unwrap();
        assert_eq!(
            t.u_sampling,
            USampling::Incremental {
                start: 0.1,
                step: 0.1,
                period: 3
            }
        );
        assert_eq!(t.penalty.form, PenaltyForm::Hinge);
        assert_eq!(t.gate_learner, GateLearner::Concrete);
        assert!(cfg.check_keys(RUN_KEYS).is_ok());
    }

    #[test]
    fn rejects_unknown_values() {
        for text in [
            "model.arch = mlp",
            "model.ordering = learned",
            "train.u_sampling = cosine",
            "gates.learner = sgd",
        ] {
            let cfg = Config::parse(text).unwrap();
            let r = ModelConfig::from_config(&cfg)
                .map(drop)
                .and_then(|_| train_config(&cfg).map(drop));
            assert!(r.is_err(), "{text}");
        }
    }

    #[test]
    fn discretization_reaches_every_module() {
        let m = ModelConfig {
            discretization: Discretization::Ceiling,
            ..Default::default()
        };
        let spec = m.spec(&[1, 8, 8], 10);
        let gated: Vec<_> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Gated(g) => Some(g.discretization),
                _ => None,
            })
            .collect();
        assert_eq!(gated, vec![Discretization::Ceiling; 4]);
    }
}
