use serde::{Deserialize, Serialize};

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::fusion::{Architecture, FusionKind, GraphPlacement, DEFAULT_HEADS, DEFAULT_K_NN};
use crate::select::{SelectionMode, SelectionSettings, SelectorConfig, DEFAULT_HIDDEN, DEFAULT_TOP_K, DEFAULT_WINDOW};
use crate::train::focal::{DEFAULT_ALPHA, DEFAULT_GAMMA};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub w: i32,
    #[serde(rename = "K")]
    pub top_k: usize,
    pub k_nn: usize,
    pub heads: usize,
    /// Learnable prompt rows; `None` takes the manifest's value.
    pub t: Option<usize>,
    pub seed: u64,
    /// Must agree with the manifest when given.
    pub task_mode: Option<TaskMode>,
    pub selection: SelectionMode,
    pub use_gcn: bool,
    pub use_text: bool,
    pub fusion: FusionKind,
    pub graph_placement: GraphPlacement,
    pub selector_epochs: usize,
    pub selector_lr: f64,
    pub selector_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 50,
            patience: 10,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            w: DEFAULT_WINDOW,
            top_k: DEFAULT_TOP_K,
            k_nn: DEFAULT_K_NN,
            heads: DEFAULT_HEADS,
            t: None,
            seed: 7,
            task_mode: None,
            selection: SelectionMode::Tsps,
            use_gcn: true,
            use_text: true,
            fusion: FusionKind::Hybrid,
            graph_placement: GraphPlacement::After,
            selector_epochs: 30,
            selector_lr: 1e-3,
            selector_hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.lr >= 0.0) || !(self.selector_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("K", self.top_k),
            ("k_nn", self.k_nn),
            ("heads", self.heads),
            ("selector_hidden", self.selector_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.w < 1 {
            return bad(format!("w must be at least 1, got {}", self.w));
        }
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            use_gcn: self.use_gcn,
            use_text: self.use_text,
            fusion: self.fusion,
            placement: self.graph_placement,
            heads: self.heads,
            k_nn: self.k_nn,
        }
    }

    pub fn selection_settings(&self) -> SelectionSettings {
        SelectionSettings {
            mode: self.selection,
            window: self.w,
            top_k: self.top_k,
            seed: self.seed,
        }
    }

    pub fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            epochs: self.selector_epochs,
            lr: self.selector_lr,
            hidden: self.selector_hidden,
            alpha: self.alpha,
            gamma: self.gamma,
            seed: self.seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
