//! Run configuration: a flat key/value surface with dotted sections, shared
//! by config files and CLI flag overrides, echoed verbatim into the summary
//! JSON.

use crate::cells::{CellFamily, Dims, LruInit};
use crate::error::{Result, TpcError};
use crate::optim::OptimiserKind;
use crate::tasks::COPY_VOCAB;
use crate::temporal::UpdateSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Algorithm {
    SpatialBp,
    Bptt,
    Tpc,
    TpcRtrl,
}

impl Algorithm {
    pub fn is_pc(self) -> bool {
        matches!(self, Algorithm::Tpc | Algorithm::TpcRtrl)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial_bp" => Some(Algorithm::SpatialBp),
            "bptt" => Some(Algorithm::Bptt),
            "tpc" => Some(Algorithm::Tpc),
            "tpc_rtrl" => Some(Algorithm::TpcRtrl),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SpatialBp => "spatial_bp",
            Algorithm::Bptt => "bptt",
            Algorithm::Tpc => "tpc",
            Algorithm::TpcRtrl => "tpc_rtrl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    Copy,
    CharLm,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(TaskKind::Copy),
            "char_lm" => Some(TaskKind::CharLm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::CharLm => "char_lm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScheduleKind {
    Constant,
    CosineWarmup,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct InferenceSettings {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Complete description of one run. Copy-task defaults reproduce the
/// benchmark settings exactly: hidden 128, batch 16, Adam at 5e-3 with no
/// schedule, inference lr 0.9 with 4 iterations and momentum 0.9.
#[derive(Clone, Debug, serde::Serialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub cell: CellFamily,
    pub task: TaskKind,
    pub float64: bool,
    pub dims: Dims,
    pub inference: InferenceSettings,
    pub optimiser: OptimiserKind,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_frac: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub batches: u64,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub seed_data: u64,
    pub seed_init: u64,
    pub label_smoothing: f64,
    pub update_mode: UpdateSchedule,
    pub dropout: f64,
    pub lru_init: LruInit,
    pub stop_accuracy: Option<f64>,
    pub stop_loss: Option<f64>,
    pub corpus: Option<String>,
    pub window: usize,
    pub vocab_limit: usize,
    pub mask_all: bool,
    pub synth_corpus_bytes: usize,
}

impl RunConfig {
    pub fn defaults(task: TaskKind, algorithm: Algorithm) -> Self {
        match task {
            TaskKind::Copy => RunConfig {
                algorithm,
                cell: CellFamily::TanhRnn,
                task,
                float64: false,
                dims: Dims {
                    input: COPY_VOCAB,
                    recurrent: 128,
                    hidden: 128,
                    output: COPY_VOCAB,
                },
                inference: InferenceSettings {
                    iterations: 4,
                    lr: 0.9,
                    momentum: 0.9,
                },
                optimiser: OptimiserKind::adam_default(),
                lr: 5e-3,
                schedule: ScheduleKind::Constant,
                warmup_frac: 0.1,
                clip_norm: None,
                batch_size: 16,
                batches: 5000,
                eval_interval: 16,
                eval_samples: 200,
                seed_data: 1,
                seed_init: 1,
                label_smoothing: 0.0,
                update_mode: UpdateSchedule::TimeBatched,
                dropout: 0.0,
                lru_init: LruInit::default(),
                stop_accuracy: None,
                stop_loss: None,
                corpus: None,
                window: 70,
                vocab_limit: COPY_VOCAB,
                mask_all: false,
                synth_corpus_bytes: 200_000,
            },
            TaskKind::CharLm => RunConfig {
                algorithm,
                cell: CellFamily::Lru,
                task,
                float64: false,
                dims: Dims {
                    input: 40,
                    recurrent: 64,
                    hidden: 64,
                    output: 40,
                },
                inference: InferenceSettings {
                    iterations: 3,
                    lr: 0.1,
                    momentum: 0.9,
                },
                optimiser: OptimiserKind::adam_default(),
                lr: 5e-3,
                schedule: ScheduleKind::CosineWarmup,
                warmup_frac: 0.1,
                clip_norm: Some(2.0),
                batch_size: 32,
                batches: 1500,
                eval_interval: 16,
                eval_samples: 200,
                seed_data: 1,
                seed_init: 1,
                label_smoothing: 0.0,
                update_mode: UpdateSchedule::TimeBatched,
                dropout: 0.0,
                lru_init: LruInit::default(),
                stop_accuracy: None,
                stop_loss: None,
                corpus: None,
                window: 70,
                vocab_limit: 40,
                mask_all: false,
                synth_corpus_bytes: 200_000,
            },
        }
    }

    /// Applies one `key = value` pair; unknown keys and malformed values are
    /// usage errors naming the field.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |message: String| TpcError::Config {
            field: key.to_string(),
            message,
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| err(format!("expected a number, got `{v}`")))
        };
        let parse_u64 = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| err(format!("expected an integer, got `{v}`")))
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| err(format!("expected an integer, got `{v}`")))
        };
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(err(format!("expected true/false, got `{v}`"))),
        };
        match key {
            "run.algorithm" => {
                self.algorithm =
                    Algorithm::parse(value).ok_or_else(|| err(format!("unknown algorithm `{value}`")))?
            }
            "run.cell" => {
                self.cell = match value {
                    "tanh_rnn" => CellFamily::TanhRnn,
                    "lru" => CellFamily::Lru,
                    _ => return Err(err(format!("unknown cell `{value}`"))),
                }
            }
            "run.task" => {
                self.task =
                    TaskKind::parse(value).ok_or_else(|| err(format!("unknown task `{value}`")))?
            }
            "run.float64" => self.float64 = parse_bool(value)?,
            "run.batches" => self.batches = parse_u64(value)?,
            "run.batch_size" => self.batch_size = parse_usize(value)?,
            "run.eval_interval" => self.eval_interval = parse_u64(value)?,
            "run.eval_samples" => self.eval_samples = parse_usize(value)?,
            "run.seed_data" => self.seed_data = parse_u64(value)?,
            "run.seed_init" => self.seed_init = parse_u64(value)?,
            "run.stop_accuracy" => {
                self.stop_accuracy = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "run.stop_loss" => {
                self.stop_loss = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "dims.input" => self.dims.input = parse_usize(value)?,
            "dims.recurrent" => self.dims.recurrent = parse_usize(value)?,
            "dims.hidden" => self.dims.hidden = parse_usize(value)?,
            "dims.output" => self.dims.output = parse_usize(value)?,
            "inference.iterations" => self.inference.iterations = parse_usize(value)?,
            "inference.lr" => self.inference.lr = parse_f64(value)?,
            "inference.momentum" => self.inference.momentum = parse_f64(value)?,
            "optim.kind" => {
                self.optimiser = match value {
                    "adam" => OptimiserKind::adam_default(),
                    "sgd" => OptimiserKind::Sgd { momentum: 0.0 },
                    _ => return Err(err(format!("unknown optimiser `{value}`"))),
                }
            }
            "optim.lr" => self.lr = parse_f64(value)?,
            "optim.beta1" => {
                if let OptimiserKind::Adam { beta1, .. } = &mut self.optimiser {
                    *beta1 = parse_f64(value)?;
                } else {
                    return Err(err("beta1 applies to adam only".into()));
                }
            }
            "optim.beta2" => {
                if let OptimiserKind::Adam { beta2, .. } = &mut self.optimiser {
                    *beta2 = parse_f64(value)?;
                } else {
                    return Err(err("beta2 applies to adam only".into()));
                }
            }
            "optim.eps" => {
                if let OptimiserKind::Adam { eps, .. } = &mut self.optimiser {
                    *eps = parse_f64(value)?;
                } else {
                    return Err(err("eps applies to adam only".into()));
                }
            }
            "optim.momentum" => {
                if let OptimiserKind::Sgd { momentum } = &mut self.optimiser {
                    *momentum = parse_f64(value)?;
                } else {
                    return Err(err("momentum applies to sgd only".into()));
                }
            }
            "optim.clip_norm" => {
                self.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "schedule.kind" => {
                self.schedule = match value {
                    "constant" => ScheduleKind::Constant,
                    "cosine_warmup" => ScheduleKind::CosineWarmup,
                    _ => return Err(err(format!("unknown schedule `{value}`"))),
                }
            }
            "schedule.warmup_frac" => self.warmup_frac = parse_f64(value)?,
            "train.update_mode" => {
                self.update_mode = match value {
                    "time_batched" => UpdateSchedule::TimeBatched,
                    "immediate" => UpdateSchedule::Immediate,
                    _ => return Err(err(format!("unknown update mode `{value}`"))),
                }
            }
            "train.label_smoothing" => self.label_smoothing = parse_f64(value)?,
            "model.dropout" => self.dropout = parse_f64(value)?,
            "model.lru_radius_min" => self.lru_init.radius_min = parse_f64(value)?,
            "model.lru_radius_max" => self.lru_init.radius_max = parse_f64(value)?,
            "model.lru_phase_max" => self.lru_init.phase_max = parse_f64(value)?,
            "task.corpus" => {
                self.corpus = if value == "none" {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "task.window" => self.window = parse_usize(value)?,
            "task.vocab_limit" => self.vocab_limit = parse_usize(value)?,
            "task.mask_all" => self.mask_all = parse_bool(value)?,
            "task.synth_corpus_bytes" => self.synth_corpus_bytes = parse_usize(value)?,
            _ => return Err(err("unknown configuration key".into())),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TpcError::Config {
                    field: format!("line {}", lineno + 1),
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical key/value rendering of the resolved configuration.
    pub fn render(&self) -> String {
        let opt_f64 = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x}"));
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("run.algorithm", self.algorithm.name().into());
        push(
            "run.cell",
            match self.cell {
                CellFamily::TanhRnn => "tanh_rnn".into(),
                CellFamily::Lru => "lru".into(),
            },
        );
        push("run.task", self.task.name().into());
        push("run.float64", format!("{}", self.float64));
        push("run.batches", format!("{}", self.batches));
        push("run.batch_size", format!("{}", self.batch_size));
        push("run.eval_interval", format!("{}", self.eval_interval));
        push("run.eval_samples", format!("{}", self.eval_samples));
        push("run.seed_data", format!("{}", self.seed_data));
        push("run.seed_init", format!("{}", self.seed_init));
        push("run.stop_accuracy", opt_f64(self.stop_accuracy));
        push("run.stop_loss", opt_f64(self.stop_loss));
        push("dims.input", format!("{}", self.dims.input));
        push("dims.recurrent", format!("{}", self.dims.recurrent));
        push("dims.hidden", format!("{}", self.dims.hidden));
        push("dims.output", format!("{}", self.dims.output));
        push("inference.iterations", format!("{}", self.inference.iterations));
        push("inference.lr", format!("{}", self.inference.lr));
        push("inference.momentum", format!("{}", self.inference.momentum));
        match self.optimiser {
            OptimiserKind::Adam { beta1, beta2, eps } => {
                push("optim.kind", "adam".into());
                push("optim.beta1", format!("{beta1}"));
                push("optim.beta2", format!("{beta2}"));
                push("optim.eps", format!("{eps}"));
            }
            OptimiserKind::Sgd { momentum } => {
                push("optim.kind", "sgd".into());
                push("optim.momentum", format!("{momentum}"));
            }
        }
        push("optim.lr", format!("{}", self.lr));
        push("optim.clip_norm", opt_f64(self.clip_norm));
        push(
            "schedule.kind",
            match self.schedule {
                ScheduleKind::Constant => "constant".into(),
                ScheduleKind::CosineWarmup => "cosine_warmup".into(),
            },
        );
        push("schedule.warmup_frac", format!("{}", self.warmup_frac));
        push(
            "train.update_mode",
            match self.update_mode {
                UpdateSchedule::TimeBatched => "time_batched".into(),
                UpdateSchedule::Immediate => "immediate".into(),
            },
        );
        push("train.label_smoothing", format!("{}", self.label_smoothing));
        push("model.dropout", format!("{}", self.dropout));
        push("model.lru_radius_min", format!("{}", self.lru_init.radius_min));
        push("model.lru_radius_max", format!("{}", self.lru_init.radius_max));
        push("model.lru_phase_max", format!("{}", self.lru_init.phase_max));
        push(
            "task.corpus",
            self.corpus.clone().unwrap_or_else(|| "none".into()),
        );
        push("task.window", format!("{}", self.window));
        push("task.vocab_limit", format!("{}", self.vocab_limit));
        push("task.mask_all", format!("{}", self.mask_all));
        push(
            "task.synth_corpus_bytes",
            format!("{}", self.synth_corpus_bytes),
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |field: &str, message: String| {
            Err(TpcError::Config {
                field: field.into(),
                message,
            })
        };
        self.dims.validate(self.cell)?;
        if self.batch_size == 0 {
            return cfg_err("run.batch_size", "must be positive".into());
        }
        if self.batches == 0 {
            return cfg_err("run.batches", "must be positive".into());
        }
        if self.eval_interval == 0 {
            return cfg_err("run.eval_interval", "must be positive".into());
        }
        if self.eval_samples == 0 {
            return cfg_err("run.eval_samples", "must be positive".into());
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return cfg_err("train.label_smoothing", "must be in [0, 0.5)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg_err("model.dropout", "must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return cfg_err("schedule.warmup_frac", "must be in [0, 1)".into());
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return cfg_err("optim.clip_norm", "must be positive".into());
            }
        }
        if self.algorithm.is_pc() {
            if self.inference.lr <= 0.0 {
                return cfg_err("inference.lr", "must be positive".into());
            }
            if !(0.0..1.0).contains(&self.inference.momentum) {
                return cfg_err("inference.momentum", "must be in [0, 1)".into());
            }
        }
        match self.task {
            TaskKind::Copy => {
                if self.dims.input != COPY_VOCAB || self.dims.output != COPY_VOCAB {
                    return cfg_err(
                        "dims.input",
                        format!("copy task requires input/output = {COPY_VOCAB}"),
                    );
                }
                if self.cell != CellFamily::TanhRnn {
                    return cfg_err("run.cell", "copy task uses the tanh cell".into());
                }
            }
            TaskKind::CharLm => {
                if self.window == 0 {
                    return cfg_err("task.window", "must be positive".into());
                }
                if self.dims.input != self.vocab_limit || self.dims.output != self.vocab_limit {
                    return cfg_err(
                        "dims.input",
                        format!(
                            "char task requires input/output = vocab limit ({})",
                            self.vocab_limit
                        ),
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_defaults_match_the_benchmark_settings() {
        let cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::TpcRtrl);
        assert_eq!(cfg.lr, 5e-3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.dims.recurrent, 128);
        assert_eq!(cfg.dims.input, 10);
        assert_eq!(cfg.dims.output, 10);
        assert_eq!(cfg.inference.lr, 0.9);
        assert_eq!(cfg.inference.iterations, 4);
        assert_eq!(cfg.inference.momentum, 0.9);
        assert_eq!(cfg.eval_interval, 16);
        assert_eq!(cfg.eval_samples, 200);
        assert!(matches!(cfg.optimiser, OptimiserKind::Adam { .. }));
        assert_eq!(cfg.schedule, ScheduleKind::Constant);
        assert_eq!(cfg.update_mode, UpdateSchedule::TimeBatched);
        assert!(cfg.clip_norm.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn apply_round_trips_through_render() {
        let mut cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::Bptt);
        cfg.apply("optim.lr", "0.001").unwrap();
        cfg.apply("run.seed_data", "99").unwrap();
        cfg.apply("run.stop_accuracy", "0.995").unwrap();
        let rendered = cfg.render();
        let mut clone = RunConfig::defaults(TaskKind::Copy, Algorithm::Bptt);
        clone.apply_file(&rendered).unwrap();
        assert_eq!(clone.render(), rendered);
        assert_eq!(clone.lr, 0.001);
        assert_eq!(clone.seed_data, 99);
        assert_eq!(clone.stop_accuracy, Some(0.995));
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let mut cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::Bptt);
        let e = cfg.apply("run.bogus", "1").unwrap_err();
        assert!(e.to_string().contains("run.bogus"));
        let e = cfg.apply("optim.lr", "fast").unwrap_err();
        assert!(e.to_string().contains("optim.lr"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::Tpc);
        cfg.apply_file("# comment\n\noptim.lr = 0.01 # inline\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn validation_rejects_out_of_range_fields() {
        let mut cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::Tpc);
        cfg.label_smoothing = 0.7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::Tpc);
        cfg.inference.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::defaults(TaskKind::Copy, Algorithm::Bptt);
        cfg.dims.input = 7;
        assert!(cfg.validate().is_err());
    }
}
