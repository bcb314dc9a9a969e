use std::fmt::Write as _;

use super::ModelError;

/// Total downsampling between the input image and the regressed flow.
pub const PREDICTION_STRIDE: usize = 4;

/// Architecture hyper-parameters. Scales are ordered coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_scales: usize,
    /// Maximum correlation displacement per scale, coarse to fine.
    pub max_displacements: Vec<usize>,
    /// Correlation patch radius `k`; 0 compares single feature vectors.
    pub patch_radius: usize,
    pub conv1_channels: usize,
    /// Width of the second and third extractor convolutions.
    pub feature_channels: usize,
    pub pyramid_channels: usize,
    pub encoder_channels: usize,
    pub hidden_channels: usize,
    pub head_channels: usize,
    pub conv1_kernel: usize,
    /// Kernel of the second and third extractor convolutions.
    pub mid_kernel: usize,
    pub kernel: usize,
    pub deconv_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_scales: 4,
            max_displacements: vec![5, 5, 10, 10],
            patch_radius: 0,
            conv1_channels: 64,
            feature_channels: 128,
            pyramid_channels: 128,
            encoder_channels: 64,
            hidden_channels: 64,
            head_channels: 64,
            conv1_kernel: 7,
            mid_kernel: 5,
            kernel: 3,
            deconv_kernel: 4,
            leaky_slope: 0.1,
        }
    }
}

impl ModelConfig {
    /// Narrow preset for finite-difference checks and desk-scale training.
    pub fn tiny() -> Self {
        ModelConfig {
            conv1_channels: 8,
            feature_channels: 16,
            pyramid_channels: 16,
            encoder_channels: 16,
            hidden_channels: 16,
            head_channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.num_scales == 0 {
            return bad("num_scales must be at least 1".into());
        }
        if self.max_displacements.len() != self.num_scales {
            return bad(format!(
                "max_displacements has {} entries, num_scales is {}",
                self.max_displacements.len(),
                self.num_scales
            ));
        }
        if self.max_displacements.contains(&0) {
            return bad("every max displacement must be at least 1".into());
        }
        let widths = [
            ("conv1_channels", self.conv1_channels),
            ("feature_channels", self.feature_channels),
            ("pyramid_channels", self.pyramid_channels),
            ("encoder_channels", self.encoder_channels),
            ("hidden_channels", self.hidden_channels),
            ("head_channels", self.head_channels),
        ];
        for (name, v) in widths {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, k) in [
            ("conv1_kernel", self.conv1_kernel),
            ("mid_kernel", self.mid_kernel),
            ("kernel", self.kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd for same-size padding, got {k}"));
            }
        }
        if self.deconv_kernel < 2 || self.deconv_kernel % 2 != 0 {
            return bad(format!(
                "deconv_kernel must be even and at least 2 to double exactly, got {}",
                self.deconv_kernel
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Image sides must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.num_scales + 1)
    }

    /// Padding that makes a stride-2 transposed convolution double its input.
    pub fn deconv_padding(&self) -> usize {
        (self.deconv_kernel - 2) / 2
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool, ModelError> {
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| ModelError::Config(format!("{key} = {v}: {e}")))
        };
        match key {
            "preset" => match value {
                "default" => *self = Self::default(),
                "tiny" => *self = Self::tiny(),
                other => return Err(ModelError::Config(format!("unknown preset `{other}`"))),
            },
            "num_scales" => self.num_scales = int(value)?,
            "max_displacements" => {
                self.max_displacements = value.split(',').map(|s| int(s.trim())).collect::<Result<_, _>>()?
            }
            "patch_radius" => self.patch_radius = int(value)?,
            "conv1_channels" => self.conv1_channels = int(value)?,
            "feature_channels" => self.feature_channels = int(value)?,
            "pyramid_channels" => self.pyramid_channels = int(value)?,
            "encoder_channels" => self.encoder_channels = int(value)?,
            "hidden_channels" => self.hidden_channels = int(value)?,
            "head_channels" => self.head_channels = int(value)?,
            "conv1_kernel" => self.conv1_kernel = int(value)?,
            "mid_kernel" => self.mid_kernel = int(value)?,
            "kernel" => self.kernel = int(value)?,
            "deconv_kernel" => self.deconv_kernel = int(value)?,
            "leaky_slope" => {
                self.leaky_slope = value
                    .parse()
                    .map_err(|e| ModelError::Config(format!("{key} = {value}: {e}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        for (key, value) in parse_key_values(text).map_err(ModelError::Config)? {
            if !cfg.apply(&key, &value)? {
                return Err(ModelError::Config(format!("unknown model config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d: Vec<String> = self.max_displacements.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "num_scales = {}", self.num_scales);
        let _ = writeln!(s, "max_displacements = {}", d.join(","));
        let _ = writeln!(s, "patch_radius = {}", self.patch_radius);
        let _ = writeln!(s, "conv1_channels = {}", self.conv1_channels);
        let _ = writeln!(s, "feature_channels = {}", self.feature_channels);
        let _ = writeln!(s, "pyramid_channels = {}", self.pyramid_channels);
        let _ = writeln!(s, "encoder_channels = {}", self.encoder_channels);
        let _ = writeln!(s, "hidden_channels = {}", self.hidden_channels);
        let _ = writeln!(s, "head_channels = {}", self.head_channels);
        let _ = writeln!(s, "conv1_kernel = {}", self.conv1_kernel);
        let _ = writeln!(s, "mid_kernel = {}", self.mid_kernel);
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "deconv_kernel = {}", self.deconv_kernel);
        let _ = writeln!(s, "leaky_slope = {}", self.leaky_slope);
        s
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.max_displacements = vec![2, 3, 4, 4];
        cfg.leaky_slope = 0.2;
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn preset_then_override() {
        let cfg = ModelConfig::from_text("preset = tiny\n# comment\nhidden_channels = 4\n").unwrap();
        assert_eq!(cfg.conv1_channels, 8);
        assert_eq!(cfg.hidden_channels, 4);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig::from_text("bogus = 1").is_err());
        assert!(ModelConfig::from_text("max_displacements = 5,5,10").is_err());
        assert!(ModelConfig::from_text("max_displacements = 5,0,10,10").is_err());
        assert!(ModelConfig::from_text("kernel = 4").is_err());
        assert!(ModelConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn defaults_follow_architecture() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.max_displacements, vec![5, 5, 10, 10]);
        assert_eq!((cfg.conv1_kernel, cfg.mid_kernel, cfg.kernel, cfg.deconv_kernel), (7, 5, 3, 4));
        assert_eq!(cfg.required_multiple(), 32);
        assert_eq!(cfg.deconv_padding(), 1);
    }
}
