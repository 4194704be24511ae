//! Run configuration, read from and written to `key = value` text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::synthdata::{parse_key_values, LabelProtocol};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the reconstruction loss (and the codebook auxiliary term).
    pub lambda_tae: f64,
    /// Weight of the prototype losses.
    pub lambda_akg: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub margin: f64,
    pub temperature: f64,
    /// Codebook slots; 4096 at paper scale.
    pub codebook_size: usize,
    /// Expected task count; 0 accepts whatever the dataset declares.
    pub tasks: usize,
    /// Prototype and token width; 1024 at paper scale.
    pub proto_dim: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub protocol: Option<LabelProtocol>,
    pub tc_literal_sign: bool,
    pub freeze_prototype_at_eval: bool,
    pub use_vq: bool,
    pub use_retrieval: bool,
    pub use_tke: bool,
    pub use_tc: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    /// Evaluate on the test split every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_tae: 1.0,
            lambda_akg: 1.0,
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            margin: 0.2,
            temperature: 1.0,
            codebook_size: 64,
            tasks: 0,
            proto_dim: 64,
            channels: 32,
            depth: 2,
            heads: 8,
            protocol: None,
            tc_literal_sign: false,
            freeze_prototype_at_eval: true,
            use_vq: true,
            use_retrieval: true,
            use_tke: true,
            use_tc: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            eval_every: 0,
        }
    }
}

/// The four ablation rows, cumulative from the plain multi-task baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    Baseline,
    WithTae,
    WithTke,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::Baseline,
        AblationRow::WithTae,
        AblationRow::WithTke,
        AblationRow::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::WithTae => "+tae",
            AblationRow::WithTke => "+tke",
            AblationRow::Full => "+tc",
        }
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<TrainConfig> {
        match name {
            "desk" => Ok(TrainConfig::default()),
            "paper-scale" => Ok(TrainConfig {
                learning_rate: 2e-5,
                epochs: 100,
                batch_size: 4,
                codebook_size: 4096,
                proto_dim: 1024,
                ..TrainConfig::default()
            }),
            other => Err(Error::Validation(format!("unknown preset '{other}'"))),
        }
    }

    /// This config with the component switches of an ablation row.
    pub fn for_row(&self, row: AblationRow) -> TrainConfig {
        let mut c = self.clone();
        let (vq, retrieval, tke, tc) = match row {
            AblationRow::Baseline => (false, false, false, false),
            AblationRow::WithTae => (true, false, false, false),
            AblationRow::WithTke => (true, true, true, false),
            AblationRow::Full => (true, true, true, true),
        };
        c.use_vq = vq;
        c.use_retrieval = retrieval;
        c.use_tke = tke;
        c.use_tc = tc;
        if row == AblationRow::Baseline {
            c.lambda_tae = 0.0;
            c.lambda_akg = 0.0;
        }
        c
    }

    pub fn uses_prototype(&self) -> bool {
        self.use_retrieval || self.use_tke || self.use_tc
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_tae >= 0.0 && self.lambda_akg >= 0.0,
            "loss weights must be nonnegative"
        );
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive"
        );
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.temperature > 0.0, "temperature must be positive");
        ensure!(self.margin >= 0.0, "margin must be nonnegative");
        for (name, v) in [
            ("codebook_size", self.codebook_size),
            ("proto_dim", self.proto_dim),
            ("channels", self.channels),
            ("depth", self.depth),
            ("heads", self.heads),
        ] {
            ensure!(v >= 1, "{name} must be positive");
        }
        ensure!(
            self.proto_dim % self.heads == 0,
            "proto_dim {} is not divisible by {} heads",
            self.proto_dim,
            self.heads
        );
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(
            (0.0..=1.0).contains(&self.bn_momentum),
            "bn_momentum must lie in [0, 1]"
        );
        Ok(())
    }

    pub fn parse(path: &Path, text: &str) -> Result<TrainConfig> {
        let kv = parse_key_values(path, text)?;
        let mut cfg = TrainConfig::default();
        for (line, k, v) in &kv {
            if k == "preset" {
                cfg = TrainConfig::preset(v).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: e.to_string(),
                })?;
            }
        }
        for (line, k, v) in kv {
            if k == "preset" {
                continue;
            }
            cfg.set(&k, &v).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(path, &text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value for {k}: '{v}'"))
        }
        fn flag(k: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("bad boolean for {k}: '{v}'")),
            }
        }
        match key {
            "lambda_tae" => self.lambda_tae = num(key, value)?,
            "lambda_akg" => self.lambda_akg = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "tasks" => self.tasks = num(key, value)?,
            "proto_dim" => self.proto_dim = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "protocol" => {
                self.protocol = match value {
                    "any" => None,
                    p => Some(p.parse().map_err(|e: Error| e.to_string())?),
                }
            }
            "tc_literal_sign" => self.tc_literal_sign = flag(key, value)?,
            "freeze_prototype_at_eval" => self.freeze_prototype_at_eval = flag(key, value)?,
            "use_vq" => self.use_vq = flag(key, value)?,
            "use_retrieval" => self.use_retrieval = flag(key, value)?,
            "use_tke" => self.use_tke = flag(key, value)?,
            "use_tc" => self.use_tc = flag(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key in a fixed order; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lambda_tae", format!("{:?}", self.lambda_tae));
        put("lambda_akg", format!("{:?}", self.lambda_akg));
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("margin", format!("{:?}", self.margin));
        put("temperature", format!("{:?}", self.temperature));
        put("codebook_size", self.codebook_size.to_string());
        put("tasks", self.tasks.to_string());
        put("proto_dim", self.proto_dim.to_string());
        put("channels", self.channels.to_string());
        put("depth", self.depth.to_string());
        put("heads", self.heads.to_string());
        put(
            "protocol",
            self.protocol.map_or_else(|| "any".to_string(), |p| p.to_string()),
        );
        put("tc_literal_sign", self.tc_literal_sign.to_string());
        put("freeze_prototype_at_eval", self.freeze_prototype_at_eval.to_string());
        put("use_vq", self.use_vq.to_string());
        put("use_retrieval", self.use_retrieval.to_string());
        put("use_tke", self.use_tke.to_string());
        put("use_tc", self.use_tc.to_string());
        put("adam_beta1", format!("{:?}", self.adam_beta1));
        put("adam_beta2", format!("{:?}", self.adam_beta2));
        put("adam_eps", format!("{:?}", self.adam_eps));
        put("bn_momentum", format!("{:?}", self.bn_momentum));
        put("eval_every", self.eval_every.to_string());
        s
    }
}
