//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::captioner::{FactorizedLayers, ModelConfig, SceneFactorization, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};

/// Which model ingredients are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "ra")]
    Ra,
    #[serde(rename = "sf")]
    Sf,
    #[serde(rename = "ra+sf")]
    RaSf,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::Ra, Mode::Sf, Mode::RaSf];

    pub fn attention(self) -> bool {
        matches!(self, Mode::Ra | Mode::RaSf)
    }

    pub fn scene(self) -> bool {
        matches!(self, Mode::Sf | Mode::RaSf)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Base => "base",
            Mode::Ra => "ra",
            Mode::Sf => "sf",
            Mode::RaSf => "ra+sf",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Mode::Base),
            "ra" => Ok(Mode::Ra),
            "sf" => Ok(Mode::Sf),
            "ra+sf" | "sf+ra" => Ok(Mode::RaSf),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

impl FromStr for FactorizedLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(FactorizedLayers::Both),
            "bottom" => Ok(FactorizedLayers::Bottom),
            "top" => Ok(FactorizedLayers::Top),
            _ => Err(Error::Config(format!("unknown factorized_layers {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Factorization rank `k`.
    pub rank: usize,
    /// Scene topics `K`.
    pub topics: usize,
    /// Regions per image.
    pub regions: usize,
    /// Attention hidden width; 0 means "same as `hidden`".
    pub attention_hidden: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub beam: usize,
    pub max_epochs: usize,
    /// Stop after this many ADAM steps; 0 means no limit.
    pub max_steps: usize,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub min_freq: usize,
    pub max_len: usize,
    pub factorize_cell: bool,
    pub factorized_layers: FactorizedLayers,
    pub attention_uses_bottom_hidden: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            embed: 32,
            rank: 64,
            topics: 4,
            regions: 8,
            attention_hidden: 0,
            minibatch: 64,
            learning_rate: 1e-3,
            beam: 10,
            max_epochs: 100,
            max_steps: 0,
            patience: 5,
            seed: 0,
            mode: Mode::RaSf,
            min_freq: 1,
            max_len: DEFAULT_MAX_LEN,
            factorize_cell: false,
            factorized_layers: FactorizedLayers::Both,
            attention_uses_bottom_hidden: false,
        }
    }
}

/// Values at the scale of the original experiments; not a desk target.
pub const FULL_SCALE_PRESET: &str = "\
hidden = 512
embed = 512
rank = 512
topics = 80
regions = 30
min_freq = 20
minibatch = 64
beam = 10
";

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("rank", self.rank),
            ("topics", self.topics),
            ("regions", self.regions),
            ("minibatch", self.minibatch),
            ("beam", self.beam),
            ("max_epochs", self.max_epochs),
            ("min_freq", self.min_freq),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "embed" => self.embed = parse(key, value)?,
            "rank" => self.rank = parse(key, value)?,
            "topics" => self.topics = parse(key, value)?,
            "regions" => self.regions = parse(key, value)?,
            "attention_hidden" => self.attention_hidden = parse(key, value)?,
            "minibatch" => self.minibatch = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "factorize_cell" => self.factorize_cell = parse(key, value)?,
            "factorized_layers" => self.factorized_layers = value.parse()?,
            "attention_uses_bottom_hidden" => self.attention_uses_bottom_hidden = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "hidden = {}\nembed = {}\nrank = {}\ntopics = {}\nregions = {}\nattention_hidden = {}\n\
             minibatch = {}\nlearning_rate = {}\nbeam = {}\nmax_epochs = {}\nmax_steps = {}\n\
             patience = {}\nseed = {}\nmode = {}\nmin_freq = {}\nmax_len = {}\nfactorize_cell = {}\n\
             factorized_layers = {}\nattention_uses_bottom_hidden = {}\n",
            self.hidden,
            self.embed,
            self.rank,
            self.topics,
            self.regions,
            self.attention_hidden,
            self.minibatch,
            self.learning_rate,
            self.beam,
            self.max_epochs,
            self.max_steps,
            self.patience,
            self.seed,
            self.mode,
            self.min_freq,
            self.max_len,
            self.factorize_cell,
            match self.factorized_layers {
                FactorizedLayers::Both => "both",
                FactorizedLayers::Bottom => "bottom",
                FactorizedLayers::Top => "top",
            },
            self.attention_uses_bottom_hidden,
        )
    }

    /// Decoder configuration for a vocabulary of `vocab_size` and region
    /// features of width `feature_dim`.
    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed,
            hidden: self.hidden,
            feature_dim,
            attention_hidden: if self.attention_hidden == 0 {
                self.hidden
            } else {
                self.attention_hidden
            },
            attention: self.mode.attention(),
            scene: self.mode.scene().then_some(SceneFactorization {
                topics: self.topics,
                rank: self.rank,
                factorize_cell: self.factorize_cell,
                layers: self.factorized_layers,
            }),
            attention_uses_bottom_hidden: self.attention_uses_bottom_hidden,
        }
    }
}
