//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pvvlm::fusion::{ModelConfig, Variant};
use pvvlm::prompt::PromptTemplate;
use pvvlm::synthgen::SceneConfig;
use pvvlm::training::TrainConfig;

/// Bad arguments or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Known keys with their defaults; an empty default means unset.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", ""),
    ("data", ""),
    ("checkpoint", ""),
    ("target", ""),
    ("days", "10"),
    ("plant", "30kw"),
    ("camera_size", ""),
    ("sun_x", ""),
    ("sun_y", ""),
    ("sun_radius", ""),
    ("cloud_radius", ""),
    ("cloud_velocity", ""),
    ("velocity_jitter", ""),
    ("attenuation", ""),
    ("day_length_steps", ""),
    ("capacity_kw", ""),
    ("noise_std", ""),
    ("horizon", "10"),
    ("horizons", "10,20,30"),
    ("frames", "1"),
    ("frame_stride", "1"),
    ("time_tolerance_s", "0"),
    ("night_fraction", "0.01"),
    ("ablation", "proposed"),
    ("d_model", "64"),
    ("patch_len", "8"),
    ("stride", "4"),
    ("tam_layers", "2"),
    ("tam_heads", "4"),
    ("vision_dim", "64"),
    ("vision_depth", "2"),
    ("vision_heads", "4"),
    ("vision_patch", "8"),
    ("vision_seed", "1592590337"),
    ("llm_dim", "64"),
    ("llm_depth", "2"),
    ("llm_heads", "4"),
    ("llm_seed", "1592590338"),
    ("image_size", "64"),
    ("n_soft", "8"),
    ("fusion_heads", "4"),
    ("template", "default"),
    ("batch_size", "32"),
    ("max_epochs", "50"),
    ("patience", "5"),
    ("lr", "0.001"),
    ("gamma", "0.1"),
    ("step_s", "3"),
    ("clip_norm", "1.0"),
    ("index", ""),
    ("no_finetune", "true"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.replace('-', "_")
}

fn check_key(key: &str) -> anyhow::Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(usage(format!("unknown config key `{key}`")))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = canonical(k.trim());
        check_key(&key)?;
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Splits `--key value` pairs; a flag followed by another flag (or nothing)
/// is read as `true`.
pub fn parse_overrides(args: &[String]) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let key = args[i]
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("unexpected argument `{}`", args[i])))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match args.get(i + 1) {
                Some(v) if !v.starts_with("--") => {
                    i += 1;
                    (key.to_string(), v.clone())
                }
                _ => (key.to_string(), "true".to_string()),
            },
        };
        let key = canonical(&key);
        if key != "config" {
            check_key(&key)?;
        }
        out.insert(key, value);
        i += 1;
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the `--config` file, then the remaining overrides.
    pub fn resolve(args: &[String]) -> anyhow::Result<Self> {
        let mut overrides = parse_overrides(args)?;
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = overrides.remove("config") {
            let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
            values.extend(parse_config_text(&text)?);
        }
        values.extend(overrides);
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key).ok_or_else(|| usage(format!("missing required --{key}")))?;
        raw.parse()
            .map_err(|e: T::Err| usage(format!("invalid value `{raw}` for {key}: {e}")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            Some(_) => self.get(key).map(Some),
            None => Ok(None),
        }
    }

    pub fn path(&self, key: &str) -> anyhow::Result<PathBuf> {
        self.get::<String>(key).map(PathBuf::from)
    }

    /// Like [`path`](Self::path) but the path must already exist.
    pub fn existing_path(&self, key: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(key)?;
        if !p.exists() {
            return Err(usage(format!("--{key} {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// All settings as `key = value` lines, loadable with `--config`.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join("config.resolved"), self.to_text())?;
        Ok(())
    }

    pub fn scene(&self) -> anyhow::Result<SceneConfig> {
        let seed = self.get("seed")?;
        let mut s = match self.raw("plant").unwrap_or("30kw") {
            "30kw" => SceneConfig::plant_30kw(seed),
            "6kw" => SceneConfig::plant_6kw(seed),
            other => return Err(usage(format!("unknown plant `{other}`; expected 30kw or 6kw"))),
        };
        if let Some(v) = self.opt("camera_size")? {
            s.image_size = v;
        }
        if let Some(v) = self.opt("sun_x")? {
            s.sun_center.0 = v;
        }
        if let Some(v) = self.opt("sun_y")? {
            s.sun_center.1 = v;
        }
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.opt(stringify!($field))? {
                    s.$field = v;
                }
            )*};
        }
        apply!(
            sun_radius,
            cloud_radius,
            cloud_velocity,
            velocity_jitter,
            attenuation,
            day_length_steps,
            capacity_kw,
            noise_std
        );
        s.validate().map_err(|e| usage(e.to_string()))?;
        Ok(s)
    }

    pub fn template(&self) -> anyhow::Result<PromptTemplate> {
        match self.raw("template").unwrap_or("default") {
            "default" => Ok(PromptTemplate::default()),
            "compact" => Ok(PromptTemplate::compact()),
            path => PromptTemplate::load(Path::new(path)).map_err(|e| usage(e.to_string())),
        }
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        self.get("ablation")
    }

    /// Model settings for `horizon` steps; `camera_size` is the raw frame side.
    pub fn model(&self, horizon: usize, camera_size: usize) -> anyhow::Result<ModelConfig> {
        let mut c = ModelConfig::new(horizon);
        c.patch.d_model = self.get("d_model")?;
        c.patch.patch_len = self.get("patch_len")?;
        c.patch.stride = self.get("stride")?;
        c.patch.layers = self.get("tam_layers")?;
        c.patch.heads = self.get("tam_heads")?;
        c.vision.dim = self.get("vision_dim")?;
        c.vision.depth = self.get("vision_depth")?;
        c.vision.heads = self.get("vision_heads")?;
        c.vision.patch = self.get("vision_patch")?;
        c.vision.seed = self.get("vision_seed")?;
        c.llm.dim = self.get("llm_dim")?;
        c.llm.depth = self.get("llm_depth")?;
        c.llm.heads = self.get("llm_heads")?;
        c.llm.seed = self.get("llm_seed")?;
        c.image_size = self.get("image_size")?;
        c.camera_size = camera_size;
        c.frames = self.get("frames")?;
        c.frame_stride = self.get("frame_stride")?;
        c.n_soft = self.get("n_soft")?;
        c.fusion_heads = self.get("fusion_heads")?;
        c.ablation = self.variant()?.config();
        c.template = self.template()?;
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let clip: f64 = self.get("clip_norm")?;
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            eta0: self.get("lr")?,
            gamma: self.get("gamma")?,
            step_s: self.get("step_s")?,
            seed: self.get("seed")?,
            clip_norm: (clip > 0.0).then_some(clip),
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn horizons(&self) -> anyhow::Result<Vec<usize>> {
        let raw: String = self.get("horizons")?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| usage(format!("invalid horizon `{s}` in horizons")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_and_flags() {
        let m = parse_overrides(&args("--days 3 --no-finetune --seed=4")).unwrap();
        assert_eq!(m["days"], "3");
        assert_eq!(m["no_finetune"], "true");
        assert_eq!(m["seed"], "4");
        assert!(parse_overrides(&args("--bogus 1")).is_err());
        assert!(parse_overrides(&args("stray")).is_err());
    }

    #[test]
    fn file_then_cli_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\ndays = 4\nseed = 9\n").unwrap();
        let mut a = args("--seed 2");
        a.extend(["--config".to_string(), path.display().to_string()]);
        let c = RunConfig::resolve(&a).unwrap();
        assert_eq!(c.get::<usize>("days").unwrap(), 4);
        assert_eq!(c.get::<u64>("seed").unwrap(), 2);
        let again = RunConfig::resolve(&args(&format!("--config {}", {
            let p = dir.path().join("resolved");
            std::fs::write(&p, c.to_text()).unwrap();
            p.display().to_string()
        })))
        .unwrap();
        assert_eq!(again, c);
        std::fs::write(&path, "mystery = 1\n").unwrap();
        let err = RunConfig::resolve(&args(&format!("--config {}", path.display()))).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }

    #[test]
    fn typed_sections() {
        let c = RunConfig::resolve(&args("--plant 6kw --noise-std 0.5 --ablation tam-only --clip-norm 0")).unwrap();
        let s = c.scene().unwrap();
        assert_eq!(s.capacity_kw, 6.0);
        assert_eq!(s.noise_std, 0.5);
        let m = c.model(10, 64).unwrap();
        assert_eq!(m.input_len(), 20);
        assert_eq!(m.ablation, Variant::Tam.config());
        assert_eq!(c.train().unwrap().clip_norm, None);
        assert_eq!(c.horizons().unwrap(), vec![10, 20, 30]);
        let c = RunConfig::resolve(&args("--batch-size zero")).unwrap();
        assert!(c.train().is_err());
    }
}
