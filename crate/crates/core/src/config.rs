//! Generator structure description.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::modconv::DemodMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Depthwise-separable convolutions, IDWT upscaling, wavelet heads.
    Mobile,
    /// StyleGAN2-like: dense 3x3 modulated convolutions, nearest-neighbour
    /// upscaling, skip-summed RGB outputs.
    DenseBaseline,
}

fn default_style_dim() -> usize {
    512
}
fn default_mapping_layers() -> usize {
    8
}
fn default_base() -> usize {
    4
}

/// Structural description of a generator.
///
/// `channels` maps a feature-map resolution to its width. The mobile
/// variant needs entries for `base_resolution ..= target_resolution / 2`
/// (its last block predicts wavelet coefficients at half the output size);
/// the dense baseline needs `base_resolution ..= target_resolution`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: Variant,
    #[serde(default = "default_style_dim")]
    pub style_dim: usize,
    #[serde(default = "default_mapping_layers")]
    pub mapping_layers: usize,
    #[serde(default = "default_base")]
    pub base_resolution: usize,
    pub target_resolution: usize,
    #[serde(with = "resolution_map")]
    pub channels: BTreeMap<usize, usize>,
    /// Demodulation used by the synthesis convolutions: `style` or
    /// `trainable`. Defaults to `trainable` for mobile, `style` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demod: Option<DemodMode>,
}

mod resolution_map {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serializer};

    // Keys are written as strings (TOML and JSON keys must be), in numeric order.
    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, usize>, s: S) -> Result<S::Ok, S::Error> {
        let mut out = s.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            out.serialize_entry(&k.to_string(), v)?;
        }
        out.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, usize>, D::Error> {
        let raw = BTreeMap::<String, usize>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|r| (r, v))
                    .map_err(|_| D::Error::custom(format!("channel key `{k}` is not a resolution")))
            })
            .collect()
    }
}

/// StyleGAN2 config-f widths.
pub fn stylegan2_f_widths(target: usize) -> BTreeMap<usize, usize> {
    [
        (4, 512),
        (8, 512),
        (16, 512),
        (32, 512),
        (64, 512),
        (128, 256),
        (256, 128),
        (512, 64),
        (1024, 32),
    ]
    .into_iter()
    .filter(|&(r, _)| r <= target)
    .collect()
}

/// Mobile widths at feature resolutions 4..=512 (for 1024 output).
pub fn mobile_widths() -> BTreeMap<usize, usize> {
    [
        (4, 512),
        (8, 512),
        (16, 512),
        (32, 512),
        (64, 512),
        (128, 256),
        (256, 128),
        (512, 64),
    ]
    .into_iter()
    .collect()
}

impl GeneratorConfig {
    /// StyleGAN2 config-f at the given output resolution.
    pub fn stylegan2_f(target: usize) -> Self {
        Self {
            variant: Variant::DenseBaseline,
            style_dim: 512,
            mapping_layers: 8,
            base_resolution: 4,
            target_resolution: target,
            channels: stylegan2_f_widths(target),
            demod: None,
        }
    }

    /// Mobile generator for 1024x1024 output with the default width set.
    pub fn mobile_1024() -> Self {
        Self {
            variant: Variant::Mobile,
            style_dim: 512,
            mapping_layers: 8,
            base_resolution: 4,
            target_resolution: 1024,
            channels: mobile_widths(),
            demod: None,
        }
    }

    /// Mobile generator for 1024x1024 output with widths chosen so the cost
    /// model lands near 7.3M synthesis parameters and 15.4 GMAC.
    pub fn mobile_1024_wide() -> Self {
        Self {
            channels: [
                (4, 640),
                (8, 640),
                (16, 640),
                (32, 640),
                (64, 640),
                (128, 384),
                (256, 128),
                (512, 128),
            ]
            .into_iter()
            .collect(),
            ..Self::mobile_1024()
        }
    }

    /// Small mobile generator producing 64x64 images; used by tests.
    pub fn mobile_64() -> Self {
        Self {
            variant: Variant::Mobile,
            style_dim: 64,
            mapping_layers: 8,
            base_resolution: 4,
            target_resolution: 64,
            channels: [(4, 64), (8, 64), (16, 32), (32, 32)].into_iter().collect(),
            demod: None,
        }
    }

    /// Small dense baseline producing 64x64 images.
    pub fn baseline_64() -> Self {
        Self {
            variant: Variant::DenseBaseline,
            style_dim: 64,
            mapping_layers: 8,
            base_resolution: 4,
            target_resolution: 64,
            channels: [(4, 64), (8, 64), (16, 32), (32, 32), (64, 16)].into_iter().collect(),
            demod: None,
        }
    }

    pub fn demod_mode(&self) -> DemodMode {
        self.demod.unwrap_or(match self.variant {
            Variant::Mobile => DemodMode::Trainable,
            Variant::DenseBaseline => DemodMode::Style,
        })
    }

    /// Resolutions at which synthesis blocks produce feature maps.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let last = match self.variant {
            Variant::Mobile => self.target_resolution / 2,
            Variant::DenseBaseline => self.target_resolution,
        };
        let mut out = vec![];
        let mut r = self.base_resolution;
        while r <= last {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn width(&self, resolution: usize) -> usize {
        self.channels[&resolution]
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "GeneratorConfig";
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.base_resolution) || self.base_resolution < 2 {
            return Err(invalid(
                OP,
                format!("base_resolution {} must be a power of two >= 2", self.base_resolution),
            ));
        }
        if !pow2(self.target_resolution) || self.target_resolution < 2 * self.base_resolution {
            return Err(invalid(
                OP,
                format!(
                    "target_resolution {} must be a power of two >= 2 * base_resolution",
                    self.target_resolution
                ),
            ));
        }
        if self.style_dim == 0 || self.mapping_layers == 0 {
            return Err(invalid(OP, "style_dim and mapping_layers must be >= 1"));
        }
        for r in self.block_resolutions() {
            let c = *self
                .channels
                .get(&r)
                .ok_or_else(|| invalid(OP, format!("no channel width for resolution {r}")))?;
            if c == 0 {
                return Err(invalid(OP, format!("width at {r} must be >= 1")));
            }
            if self.variant == Variant::Mobile && c % 4 != 0 {
                return Err(invalid(
                    OP,
                    format!("mobile width {c} at resolution {r} is not divisible by 4"),
                ));
            }
        }
        match self.demod_mode() {
            DemodMode::Style | DemodMode::Trainable => {}
            m => {
                return Err(invalid(
                    OP,
                    format!("demod must be style or trainable, got {}", m.as_str()),
                ))
            }
        }
        if self.variant == Variant::DenseBaseline && self.demod_mode() != DemodMode::Style {
            return Err(invalid(OP, "the dense baseline only supports style demodulation"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            GeneratorConfig::stylegan2_f(1024),
            GeneratorConfig::mobile_1024(),
            GeneratorConfig::mobile_1024_wide(),
            GeneratorConfig::mobile_64(),
            GeneratorConfig::baseline_64(),
        ] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn block_resolutions_per_variant() {
        assert_eq!(GeneratorConfig::mobile_64().block_resolutions(), vec![4, 8, 16, 32]);
        assert_eq!(
            GeneratorConfig::baseline_64().block_resolutions(),
            vec![4, 8, 16, 32, 64]
        );
        assert_eq!(GeneratorConfig::mobile_1024().block_resolutions().len(), 8);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = GeneratorConfig::mobile_64();
        c.channels.insert(16, 30);
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::mobile_64();
        c.target_resolution = 48;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::mobile_64();
        c.target_resolution = 4;
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::mobile_64();
        c.channels.remove(&32);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_keeps_numeric_keys() {
        let c = GeneratorConfig::stylegan2_f(1024);
        let s = c.to_json();
        assert!(s.find("\"8\"").unwrap() < s.find("\"16\"").unwrap());
        let back: GeneratorConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
