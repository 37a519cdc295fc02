//! Run configuration: one TOML document holding the noise layout, network,
//! training settings and data source, plus named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synth_texture, ImageSource, SynthKind};
use crate::error::{config_err, Error, Result};
use crate::netspec::NetSpec;
use crate::noise::NoiseSpec;
use crate::trainer::TrainConfig;

/// Where training imagery comes from: an image file or folder, or a
/// synthetic texture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub rescale: Option<f64>,
    pub synth: Option<SynthKind>,
    /// Side length of the synthetic image.
    pub synth_size: Option<usize>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synth) {
            (Some(_), Some(_)) => Err(config_err("data: set either `path` or `synth`, not both")),
            (None, None) => Err(config_err("data: no image source (set `data.path` or `data.synth`)")),
            (Some(p), None) if !p.exists() => Err(config_err(format!("data.path: {} does not exist", p.display()))),
            _ => {
                if let Some(r) = self.rescale {
                    if !(r > 0.0 && r.is_finite()) {
                        return Err(config_err("data.rescale must be positive"));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn load(&self, patch_size: usize) -> Result<ImageSource> {
        self.validate()?;
        match (&self.path, &self.synth) {
            (Some(p), _) => ImageSource::load(p, patch_size, self.rescale),
            (None, Some(kind)) => {
                let size = self.synth_size.unwrap_or(4 * patch_size);
                ImageSource::from_images(vec![synth_texture(kind, size, size)?], patch_size)
            }
            (None, None) => unreachable!("validated"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_name() -> String {
    "run".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 6] = ["text-p6", "single-honeycomb", "merrigum", "dtd", "facades", "sydney"];

/// Default training length of the presets (a desk-scale run).
pub const PRESET_STEPS: u64 = 2000;

/// Noise dimensions `(d_g, d_l, d_p)` and depth of a preset.
pub fn preset_dims(name: &str) -> Option<(usize, usize, usize, usize)> {
    Some(match name {
        "text-p6" => (0, 10, 2, 4),
        "single-honeycomb" => (0, 10, 2, 5),
        "merrigum" => (10, 30, 2, 5),
        "dtd" => (40, 20, 4, 5),
        "facades" => (40, 20, 6, 5),
        "sydney" => (30, 20, 4, 5),
        _ => return None,
    })
}

/// A preset run: its noise layout and depth, 160 pixel patches, default
/// optimizer settings and a desk-scale step count. The data source is left
/// for the caller to fill in.
pub fn preset(name: &str) -> Result<RunConfig> {
    let (d_g, d_l, d_p, depth) = preset_dims(name).ok_or_else(|| {
        config_err(format!("unknown preset {name:?}; available: {}", PRESET_NAMES.join(", ")))
    })?;
    let net = NetSpec::with_depth(depth);
    let train = TrainConfig {
        steps: PRESET_STEPS,
        ..TrainConfig::default()
    };
    let l = train.patch_size / net.upsample_factor();
    Ok(RunConfig {
        name: name.into(),
        out_dir: default_out_dir(),
        noise: NoiseSpec::new(d_l, d_g, d_p, l, l),
        net,
        train,
        data: DataConfig::default(),
    })
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {}", e.message().trim())).with_span(e.span(), text))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Everything except the data source, which is checked on load.
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        let f = self.net.upsample_factor();
        if self.noise.l * f != self.train.patch_size || self.noise.m * f != self.train.patch_size {
            return Err(config_err(format!(
                "train.patch_size = {} must equal 2^depth * noise.L = {} and 2^depth * noise.M = {}",
                self.train.patch_size,
                f * self.noise.l,
                f * self.noise.m
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err("name must be a non-empty plain file name"));
        }
        Ok(())
    }

    /// Apply `section.field=value` overrides. Values are parsed as TOML
    /// (`4`, `2e-4`, `true`, `"text"`); anything unparsable is taken as a
    /// string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| config_err(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {o:?} is not of the form key=value")))?;
            let value = parse_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut doc;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| config_err(format!("override {key}: {p} is not a section")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| config_err(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

trait WithSpan {
    fn with_span(self, span: Option<std::ops::Range<usize>>, text: &str) -> Self;
}

impl WithSpan for Error {
    /// Append the offending line number to a config error.
    fn with_span(self, span: Option<std::ops::Range<usize>>, text: &str) -> Self {
        match (self, span) {
            (Error::Config(msg), Some(s)) => {
                let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                Error::Config(format!("{msg} (line {line})"))
            }
            (e, _) => e,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_the_table_values() {
        let table = [
            ("text-p6", 0, 10, 2, 4),
            ("single-honeycomb", 0, 10, 2, 5),
            ("merrigum", 10, 30, 2, 5),
            ("dtd", 40, 20, 4, 5),
            ("facades", 40, 20, 6, 5),
            ("sydney", 30, 20, 4, 5),
        ];
        for (name, d_g, d_l, d_p, depth) in table {
            let c = preset(name).unwrap();
            assert_eq!((c.noise.d_g, c.noise.d_l, c.noise.d_p, c.net.depth), (d_g, d_l, d_p, depth), "{name}");
            assert_eq!(c.train.patch_size, 160);
            assert_eq!(c.noise.l * c.net.upsample_factor(), 160);
            c.validate().unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = preset("dtd").unwrap();
        c.data.synth = Some(SynthKind::Stripes { period: 16.0, angle: 0.3 });
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = preset("single-honeycomb").unwrap();
        let o = c
            .with_overrides(&["train.steps=7", "noise.d_l=4", "name=x", "data.synth_size=300", "train.learning_rate=1e-3"])
            .unwrap();
        assert_eq!(o.train.steps, 7);
        assert_eq!(o.noise.d_l, 4);
        assert_eq!(o.name, "x");
        assert_eq!(o.data.synth_size, Some(300));
        assert_eq!(o.train.learning_rate, 1e-3);
    }

    #[test]
    fn bad_fields_are_named() {
        let c = preset("dtd").unwrap();
        let e = c.with_overrides(&["train.stepz=3"]).unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
        let e = c.with_overrides(&["train.steps=abc"]).unwrap_err().to_string();
        assert!(e.contains("steps") || e.contains("invalid type"), "{e}");
        let e = c.with_overrides(&["net.depth=4"]).unwrap().validate().unwrap_err().to_string();
        assert!(e.contains("patch_size"), "{e}");
    }

    #[test]
    fn data_source_is_checked() {
        let mut d = DataConfig::default();
        assert!(d.validate().is_err());
        d.path = Some(PathBuf::from("/definitely/not/here.png"));
        assert!(d.validate().unwrap_err().to_string().contains("does not exist"));
        d.path = None;
        d.synth = Some(SynthKind::Checkerboard { period: 8.0 });
        d.synth_size = Some(40);
        let src = d.load(32).unwrap();
        assert_eq!(src.images[0].height(), 40);
    }
}
