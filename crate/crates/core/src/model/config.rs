use serde::{Deserialize, Serialize};

use crate::error::{CtsError, Result};

/// Scaling used inside scaled dot-product attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionScale {
    /// `1/sqrt(d_i)`, the full token width of the level.
    TokenDim,
    /// `1/sqrt(d_h)`, the per-head width.
    HeadDim,
}

impl AttentionScale {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionScale::TokenDim => "token",
            AttentionScale::HeadDim => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(AttentionScale::TokenDim),
            "head" => Ok(AttentionScale::HeadDim),
            other => Err(CtsError::config(format!(
                "attention scale must be `token` or `head`, got `{}`",
                other
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub in_channels: usize,
    pub classes: usize,
    /// Encoder depth `l`; the model has `l + 1` levels.
    pub levels: usize,
    /// Transformer blocks per decoder level.
    pub blocks: usize,
    pub base_channels: usize,
    /// Channel divisor of the down-sample linears.
    pub downsample: usize,
    /// FFN expansion factor.
    pub ffn_factor: usize,
    pub dropout: f64,
    pub use_skip_connections: bool,
    pub use_dsl: bool,
    /// Kernel of the shortcut convolution inside each residual block (1 or 3).
    pub skip_kernel: usize,
    pub attention_scale: AttentionScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 224,
            height: 224,
            in_channels: 3,
            classes: 2,
            levels: 3,
            blocks: 3,
            base_channels: 64,
            downsample: 8,
            ffn_factor: 2,
            dropout: 0.1,
            use_skip_connections: true,
            use_dsl: true,
            skip_kernel: 3,
            attention_scale: AttentionScale::TokenDim,
        }
    }
}

impl ModelConfig {
    /// Per-head width `d_h`, tied to the base channel count.
    pub fn head_dim(&self) -> usize {
        self.base_channels
    }

    /// Whether down-sample linears are instantiated.
    pub fn has_dsl(&self) -> bool {
        self.use_skip_connections && self.use_dsl
    }

    pub fn with_input(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    /// `key = value` rendering, one pair per field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("classes", self.classes.to_string()),
            ("levels", self.levels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("downsample", self.downsample.to_string()),
            ("ffn_factor", self.ffn_factor.to_string()),
            ("dropout", self.dropout.to_string()),
            ("skip_connections", self.use_skip_connections.to_string()),
            ("dsl", self.use_dsl.to_string()),
            ("skip_kernel", self.skip_kernel.to_string()),
            ("attention_scale", self.attention_scale.as_str().to_string()),
        ]
    }

    /// Sets one field from its `key = value` form. Returns `false` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| CtsError::config(format!("invalid value `{}` for `{}`", value, key)))
        }
        match key {
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "levels" => self.levels = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "base_channels" => self.base_channels = num(key, value)?,
            "downsample" => self.downsample = num(key, value)?,
            "ffn_factor" => self.ffn_factor = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "skip_connections" => self.use_skip_connections = num(key, value)?,
            "dsl" => self.use_dsl = num(key, value)?,
            "skip_kernel" => self.skip_kernel = num(key, value)?,
            "attention_scale" => self.attention_scale = AttentionScale::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Dimensions of one model level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDim {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// Encoder output channels `2^i * C_base`.
    pub channels: usize,
    /// Channels after the down-sample linear (`None` at the bridge level or
    /// when the linear is disabled).
    pub dsl_channels: Option<usize>,
    /// Side of the square patch one token covers at this level's resolution.
    pub patch_side: usize,
    /// Token width `d_i`.
    pub token_dim: usize,
    /// Attention heads `d_i / d_h`.
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDims {
    /// Tokens per decoder level, identical at every level.
    pub tokens: usize,
    pub head_dim: usize,
    pub levels: Vec<LevelDim>,
    /// Channels fed to the prediction head after un-flattening level 0.
    pub head_channels: usize,
}

impl LevelDims {
    pub fn token_dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.token_dim).collect()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.heads).collect()
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Validates `cfg` and derives the per-level dimension table.
pub fn derive_dims(cfg: &ModelConfig) -> Result<LevelDims> {
    let fail = |msg: String| Err(CtsError::config(msg));
    if cfg.width == 0 || cfg.height == 0 {
        return fail("input width and height must be positive".into());
    }
    if cfg.in_channels == 0 {
        return fail("in_channels must be positive".into());
    }
    if cfg.classes < 2 {
        return fail(format!("classes must be at least 2, got {}", cfg.classes));
    }
    if cfg.levels == 0 || cfg.levels > 12 {
        return fail(format!("levels must be in 1..=12, got {}", cfg.levels));
    }
    if cfg.blocks == 0 {
        return fail("blocks per level must be at least 1".into());
    }
    if cfg.base_channels == 0 || cfg.downsample == 0 || cfg.ffn_factor == 0 {
        return fail("base_channels, downsample and ffn_factor must be positive".into());
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return fail(format!("dropout must lie in [0, 1), got {}", cfg.dropout));
    }
    if cfg.skip_kernel != 1 && cfg.skip_kernel != 3 {
        return fail(format!("skip_kernel must be 1 or 3, got {}", cfg.skip_kernel));
    }
    let l = cfg.levels;
    let div = 1usize << l;
    if cfg.width % div != 0 || cfg.height % div != 0 {
        return fail(format!(
            "input {}x{} is not divisible by 2^levels = {}",
            cfg.width, cfg.height, div
        ));
    }
    let tokens = (cfg.width / div) * (cfg.height / div);
    let dh = cfg.head_dim();
    let mut levels = Vec::with_capacity(l + 1);
    for i in 0..=l {
        let channels = (1usize << i) * cfg.base_channels;
        let side = 1usize << (l - i);
        let dsl_channels = if i < l && cfg.has_dsl() {
            if channels % cfg.downsample != 0 {
                return fail(format!(
                    "level {} channels {} not divisible by downsample factor {}",
                    i, channels, cfg.downsample
                ));
            }
            Some(channels / cfg.downsample)
        } else {
            None
        };
        let token_dim = if i == l {
            channels
        } else if cfg.use_skip_connections {
            dsl_channels.unwrap_or(channels) * side * side
        } else {
            // Without skips the token width still follows the DSL formula.
            if channels % cfg.downsample != 0 {
                return fail(format!(
                    "level {} channels {} not divisible by downsample factor {}",
                    i, channels, cfg.downsample
                ));
            }
            channels / cfg.downsample * side * side
        };
        if token_dim % dh != 0 {
            return fail(format!(
                "level {} token width {} not divisible by head width {}",
                i, token_dim, dh
            ));
        }
        levels.push(LevelDim {
            level: i,
            height: cfg.height >> i,
            width: cfg.width >> i,
            channels,
            dsl_channels,
            patch_side: side,
            token_dim,
            heads: token_dim / dh,
        });
    }
    let side0 = 1usize << l;
    let head_channels = levels[0].token_dim / (side0 * side0);
    Ok(LevelDims {
        tokens,
        head_dim: dh,
        levels,
        head_channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: usize, h: usize, l: usize, cb: usize, m: usize) -> ModelConfig {
        ModelConfig {
            width: w,
            height: h,
            levels: l,
            base_channels: cb,
            downsample: m,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn figure_one_dims() {
        let d = derive_dims(&cfg(256, 256, 3, 64, 4)).unwrap();
        assert_eq!(d.tokens, 1024);
        assert_eq!(d.token_dims(), vec![1024, 512, 256, 512]);
        assert_eq!(d.heads(), vec![16, 8, 4, 8]);
        assert_eq!(d.head_channels, 16);
    }

    #[test]
    fn optimal_224_dims() {
        let d = derive_dims(&cfg(224, 224, 3, 64, 8)).unwrap();
        assert_eq!(d.tokens, 784);
        assert_eq!(d.token_dims(), vec![512, 256, 128, 512]);
        assert_eq!(d.heads(), vec![8, 4, 2, 8]);
        assert_eq!(d.head_channels, 8);
    }

    #[test]
    fn minimal_dims() {
        let d = derive_dims(&cfg(8, 8, 3, 8, 1)).unwrap();
        assert_eq!(d.tokens, 1);
        assert_eq!(d.token_dims(), vec![512, 256, 128, 64]);
    }

    #[test]
    fn token_dim_closed_form() {
        for &(cb, m) in &[(64, 8), (32, 4), (16, 4), (64, 2)] {
            let d = derive_dims(&cfg(64, 64, 3, cb, m)).unwrap();
            for lv in &d.levels[..3] {
                assert_eq!(lv.token_dim, cb / m * (1 << (6 - lv.level)));
            }
            assert_eq!(d.levels[3].token_dim, 8 * cb);
        }
    }

    #[test]
    fn no_dsl_token_dim() {
        let mut c = cfg(224, 224, 3, 32, 4);
        c.use_dsl = false;
        let d = derive_dims(&c).unwrap();
        assert_eq!(d.levels[0].token_dim, 32 * 64);
        assert_eq!(d.head_channels, 32);
    }

    #[test]
    fn divisibility_errors_name_the_constraint() {
        let e = derive_dims(&cfg(100, 96, 3, 64, 8)).unwrap_err().to_string();
        assert!(e.contains("divisible by 2^levels"), "{e}");
        let e = derive_dims(&cfg(64, 64, 3, 4, 8)).unwrap_err().to_string();
        assert!(e.contains("downsample"), "{e}");
        let e = derive_dims(&cfg(64, 64, 3, 24, 16)).unwrap_err().to_string();
        assert!(e.contains("head width") || e.contains("downsample"), "{e}");
        let mut c = cfg(64, 64, 3, 16, 4);
        c.classes = 1;
        assert!(derive_dims(&c).is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = cfg(64, 32, 2, 16, 4);
        c.use_dsl = false;
        c.dropout = 0.25;
        c.attention_scale = AttentionScale::HeadDim;
        let mut back = ModelConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.set("nonsense", "1").unwrap());
        assert!(back.set("levels", "three").is_err());
    }
}
