//! Key-value run configuration.
//!
//! One `section.key = value` pair per line; `#` starts a comment. Values
//! resolve as command-line flag, then file, then built-in default.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::energy::{EnergyConfig, ShapePriorCenter};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::metrics::EvalOptions;
use crate::refine::SolverOptions;
use crate::scene::{NoiseSpec, SceneParams};
use crate::shape::EmOptions;

/// Raw ordered key-value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 'key = value', found '{line}'"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid key '{k}'"),
                });
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key '{k}'"),
                });
            }
        }
        Ok(Self(map))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }
}

/// Everything a subcommand may need.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scenes: usize,
    pub jobs: usize,
    pub scene: SceneParams,
    pub noise: NoiseSpec,
    pub energy: EnergyConfig,
    pub solver: SolverOptions,
    pub eval: EvalOptions,
    pub learn_basis: usize,
    pub learn: EmOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scenes: 100,
            jobs: 1,
            scene: SceneParams::default(),
            noise: NoiseSpec::default(),
            energy: EnergyConfig::default(),
            solver: SolverOptions::default(),
            eval: EvalOptions::default(),
            learn_basis: 5,
            learn: EmOptions::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("'{key}' expects true or false, got '{v}'"))),
    }
}

impl RunConfig {
    /// Every key with its current value. `run.jobs` is left out so that
    /// echoed configurations do not depend on the thread count.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        if let Some(s) = self.seed {
            kv.set("run.seed", s);
        }
        kv.set("run.scenes", self.scenes);

        let s = &self.scene;
        kv.set("camera.fx", s.camera.fx);
        kv.set("camera.fy", s.camera.fy);
        kv.set("camera.cx", s.camera.cx);
        kv.set("camera.cy", s.camera.cy);
        kv.set("camera.image_width", s.image_width);
        kv.set("camera.image_height", s.image_height);
        kv.set("camera.height", s.camera_height);
        kv.set("scene.instances_per_scene", s.instances_per_scene);
        kv.set("scene.min_depth", s.min_depth);
        kv.set("scene.max_depth", s.max_depth);
        kv.set("scene.size_mean_l", s.size_mean.x);
        kv.set("scene.size_mean_h", s.size_mean.y);
        kv.set("scene.size_mean_w", s.size_mean.z);
        kv.set("scene.size_log_sd", s.size_log_sd);
        kv.set("scene.shape_variation", s.shape_variation);
        kv.set("scene.n_basis", s.n_basis);
        kv.set("scene.max_truncation", s.max_truncation);
        kv.set("scene.max_attempts", s.max_attempts);

        let n = &self.noise;
        kv.set("noise.landmark_px_sigma", n.landmark_px_sigma);
        kv.set("noise.landmark_occlusion_rate", n.landmark_occlusion_rate);
        kv.set("noise.box_px_sigma", n.box_px_sigma);
        kv.set("noise.theta_sigma_deg", n.theta_sigma_deg);
        kv.set("noise.sigma_log_sigma", n.sigma_log_sigma);
        kv.set("noise.depth_rel_sigma", n.depth_rel_sigma);

        let e = &self.energy;
        kv.set("energy.lambda_landmarks", e.lambda_landmarks);
        kv.set("energy.lambda_depth", e.lambda_depth);
        kv.set("energy.lambda_ground", e.lambda_ground);
        kv.set("energy.lambda_shape", e.lambda_shape);
        kv.set("energy.box_translation_scale", e.box_translation_scale);
        kv.set("energy.box_log_scale_scale", e.box_log_scale_scale);
        kv.set(
            "energy.shape_prior_center",
            match e.shape_prior_center {
                ShapePriorCenter::InstanceMean => "instance_mean",
                ShapePriorCenter::Zero => "zero",
            },
        );
        kv.set("energy.enable_box", e.enable_box);
        kv.set("energy.enable_landmarks", e.enable_landmarks);
        kv.set("energy.enable_depth", e.enable_depth);
        kv.set("energy.enable_ground", e.enable_ground);
        kv.set("energy.enable_shape", e.enable_shape);

        let o = &self.solver;
        kv.set("solver.max_iterations", o.max_iterations);
        kv.set("solver.function_tolerance", o.function_tolerance);
        kv.set("solver.parameter_tolerance", o.parameter_tolerance);
        kv.set("solver.initial_damping", o.initial_damping);
        kv.set("solver.freeze_theta", o.freeze.theta);
        kv.set("solver.freeze_translation", o.freeze.translation);
        kv.set("solver.freeze_sigma", o.freeze.sigma);
        kv.set("solver.freeze_alpha", o.freeze.alpha);

        kv.set(
            "eval.alp_gate_iou",
            self.eval.alp_gate_iou.map_or_else(|| "none".to_string(), |g| g.to_string()),
        );
        kv.set("eval.interpolation", self.eval.interpolation);

        kv.set("learn.n_basis", self.learn_basis);
        kv.set("learn.max_iterations", self.learn.max_iterations);
        kv.set("learn.tolerance", self.learn.tolerance);
        kv.set("learn.rigid_iterations", self.learn.rigid_iterations);
        kv.set("learn.min_visible", self.learn.min_visible);
        kv
    }

    /// Overwrite fields named in `kv`; unknown keys are rejected.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, v) in &kv.0 {
            let k = key.as_str();
            let f = || parse_value::<f64>(k, v);
            let u = || parse_value::<usize>(k, v);
            let b = || parse_bool(k, v);
            let s = &mut self.scene;
            let n = &mut self.noise;
            let e = &mut self.energy;
            let o = &mut self.solver;
            match k {
                "run.seed" => self.seed = Some(parse_value(k, v)?),
                "run.scenes" => self.scenes = u()?,
                "run.jobs" => self.jobs = u()?,
                "camera.fx" => s.camera.fx = f()?,
                "camera.fy" => s.camera.fy = f()?,
                "camera.cx" => s.camera.cx = f()?,
                "camera.cy" => s.camera.cy = f()?,
                "camera.image_width" => s.image_width = f()?,
                "camera.image_height" => s.image_height = f()?,
                "camera.height" => s.camera_height = f()?,
                "scene.instances_per_scene" => s.instances_per_scene = u()?,
                "scene.min_depth" => s.min_depth = f()?,
                "scene.max_depth" => s.max_depth = f()?,
                "scene.size_mean_l" => s.size_mean.x = f()?,
                "scene.size_mean_h" => s.size_mean.y = f()?,
                "scene.size_mean_w" => s.size_mean.z = f()?,
                "scene.size_log_sd" => s.size_log_sd = f()?,
                "scene.shape_variation" => s.shape_variation = f()?,
                "scene.n_basis" => s.n_basis = u()?,
                "scene.max_truncation" => s.max_truncation = f()?,
                "scene.max_attempts" => s.max_attempts = u()?,
                "noise.landmark_px_sigma" => n.landmark_px_sigma = f()?,
                "noise.landmark_occlusion_rate" => n.landmark_occlusion_rate = f()?,
                "noise.box_px_sigma" => n.box_px_sigma = f()?,
                "noise.theta_sigma_deg" => n.theta_sigma_deg = f()?,
                "noise.sigma_log_sigma" => n.sigma_log_sigma = f()?,
                "noise.depth_rel_sigma" => n.depth_rel_sigma = f()?,
                "energy.lambda_landmarks" => e.lambda_landmarks = f()?,
                "energy.lambda_depth" => e.lambda_depth = f()?,
                "energy.lambda_ground" => e.lambda_ground = f()?,
                "energy.lambda_shape" => e.lambda_shape = f()?,
                "energy.box_translation_scale" => e.box_translation_scale = f()?,
                "energy.box_log_scale_scale" => e.box_log_scale_scale = f()?,
                "energy.shape_prior_center" => {
                    e.shape_prior_center = match v.as_str() {
                        "instance_mean" => ShapePriorCenter::InstanceMean,
                        "zero" => ShapePriorCenter::Zero,
                        _ => return Err(Error::Config(format!("'{k}' expects instance_mean or zero"))),
                    }
                }
                "energy.enable_box" => e.enable_box = b()?,
                "energy.enable_landmarks" => e.enable_landmarks = b()?,
                "energy.enable_depth" => e.enable_depth = b()?,
                "energy.enable_ground" => e.enable_ground = b()?,
                "energy.enable_shape" => e.enable_shape = b()?,
                "solver.max_iterations" => o.max_iterations = u()?,
                "solver.function_tolerance" => o.function_tolerance = f()?,
                "solver.parameter_tolerance" => o.parameter_tolerance = f()?,
                "solver.initial_damping" => o.initial_damping = f()?,
                "solver.freeze_theta" => o.freeze.theta = b()?,
                "solver.freeze_translation" => o.freeze.translation = b()?,
                "solver.freeze_sigma" => o.freeze.sigma = b()?,
                "solver.freeze_alpha" => o.freeze.alpha = b()?,
                "eval.alp_gate_iou" => {
                    self.eval.alp_gate_iou = if v == "none" { None } else { Some(f()?) }
                }
                "eval.interpolation" => self.eval.interpolation = v.parse()?,
                "learn.n_basis" => self.learn_basis = u()?,
                "learn.max_iterations" => self.learn.max_iterations = u()?,
                "learn.tolerance" => self.learn.tolerance = f()?,
                "learn.rigid_iterations" => self.learn.rigid_iterations = u()?,
                "learn.min_visible" => self.learn.min_visible = u()?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&KeyValues::parse(text)?)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().to_text()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.energy.validate()?;
        self.solver.validate()?;
        CameraIntrinsics::new(
            self.scene.camera.fx,
            self.scene.camera.fy,
            self.scene.camera.cx,
            self.scene.camera.cy,
        )?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if let Some(g) = self.eval.alp_gate_iou {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config("ALP gate must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}
