//! Sectioned key/value experiment configuration. Every CLI flag has a config
//! twin; unknown sections or keys are rejected outright so a typo cannot
//! silently change an experiment.

use super::HarnessError;
use std::collections::BTreeMap;

/// Allowed keys per section; the schema is the union over the commands that
/// read the section.
const SCHEMA: &[(&str, &[&str])] = &[
    ("data", &["out", "per_class", "size", "seed"]),
    (
        "train",
        &["data", "epochs", "batch_size", "lr", "seed", "out", "history"],
    ),
    (
        "detector",
        &[
            "data",
            "loss",
            "epochs",
            "batch_size",
            "lr",
            "seed",
            "out",
            "latent",
            "sure_sigma",
            "sure_tau",
            "sure_probes",
            "diffusion_lambda",
            "model",
            "quantile",
            "calib_out",
        ],
    ),
    (
        "attack",
        &[
            "model",
            "data",
            "attack",
            "eps",
            "alpha",
            "steps",
            "seed",
            "out",
            "n_transforms",
            "noise_std",
            "mask_range",
            "random_start",
        ],
    ),
    (
        "report",
        &[
            "model", "detector", "calib", "data", "out", "eps", "methods", "seed", "input",
            "format",
        ],
    ),
];

/// Parsed configuration file: section -> key -> raw value.
#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ExperimentConfig {
    /// Parse `[section]` / `key = value` text. Comments start with '#'.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(HarnessError::Usage(format!(
                        "config line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let Some(section) = &current else {
                return Err(HarnessError::Usage(format!(
                    "config line {}: key outside any section",
                    lineno + 1
                )));
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Usage(format!(
                    "config line {}: expected key = value",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let allowed = SCHEMA
                .iter()
                .find(|(s, _)| s == section)
                .map(|(_, keys)| keys.contains(&key))
                .unwrap_or(false);
            if !allowed {
                return Err(HarnessError::Usage(format!(
                    "config line {}: unknown key '{key}' in section [{section}]",
                    lineno + 1
                )));
            }
            let prior = sections
                .entry(section.clone())
                .or_default()
                .insert(key.to_string(), value.trim().to_string());
            if prior.is_some() {
                return Err(HarnessError::Usage(format!(
                    "config line {}: duplicate key '{key}' in section [{section}]",
                    lineno + 1
                )));
            }
        }
        Ok(Self { sections })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Data(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(String::as_str)
    }

    /// Typed lookup; config supplies the value only when the CLI flag is
    /// absent.
    pub fn resolve<T: std::str::FromStr>(
        &self,
        cli: Option<T>,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T, HarnessError> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.get(section, key) {
            Some(raw) => raw.parse().map_err(|_| {
                HarnessError::Usage(format!("config [{section}] {key}: cannot parse '{raw}'"))
            }),
            None => Ok(default),
        }
    }

    pub fn resolve_opt<T: std::str::FromStr>(
        &self,
        cli: Option<T>,
        section: &str,
        key: &str,
    ) -> Result<Option<T>, HarnessError> {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.get(section, key) {
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| {
                    HarnessError::Usage(format!("config [{section}] {key}: cannot parse '{raw}'"))
                }),
            None => Ok(None),
        }
    }
}

/// An epsilon kept both as the exact text it was given ("8/255") and the
/// nearest f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsValue {
    pub text: String,
    pub value: f32,
}

impl EpsValue {
    /// Accepts exact rational text like "8/255" (parsed with a single f32
    /// division, no decimal detour) or plain decimal text.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let text = text.trim();
        let value = if let Some((num, den)) = text.split_once('/') {
            let n: u32 = num
                .trim()
                .parse()
                .map_err(|_| HarnessError::Usage(format!("bad epsilon numerator in '{text}'")))?;
            let d: u32 = den
                .trim()
                .parse()
                .map_err(|_| HarnessError::Usage(format!("bad epsilon denominator in '{text}'")))?;
            if d == 0 {
                return Err(HarnessError::Usage(format!(
                    "epsilon denominator is zero in '{text}'"
                )));
            }
            n as f32 / d as f32
        } else {
            text.parse::<f32>()
                .map_err(|_| HarnessError::Usage(format!("bad epsilon '{text}'")))?
        };
        if !(0.0..=1.0).contains(&value) {
            return Err(HarnessError::Usage(format!(
                "epsilon {text} outside [0, 1]"
            )));
        }
        Ok(Self {
            text: text.to_string(),
            value,
        })
    }

    /// Comma-separated list, e.g. "4/255,8/255".
    pub fn parse_list(text: &str) -> Result<Vec<Self>, HarnessError> {
        text.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(Self::parse)
            .collect()
    }
}

impl std::str::FromStr for EpsValue {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::parse(
            "[data]\nper_class = 50\nseed = 3\n\n[train]\nepochs = 5 # quick\n",
        )
        .unwrap();
        assert_eq!(cfg.get("data", "per_class"), Some("50"));
        assert_eq!(cfg.get("train", "epochs"), Some("5"));

        assert!(ExperimentConfig::parse("[data]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[nope]\n").is_err());
        assert!(ExperimentConfig::parse("loose = 1\n").is_err());
        assert!(ExperimentConfig::parse("[data]\nseed=1\nseed=2\n").is_err());
    }

    #[test]
    fn cli_overrides_config_overrides_default() {
        let cfg = ExperimentConfig::parse("[train]\nepochs = 7\n").unwrap();
        assert_eq!(cfg.resolve(Some(9usize), "train", "epochs", 30).unwrap(), 9);
        assert_eq!(cfg.resolve(None::<usize>, "train", "epochs", 30).unwrap(), 7);
        assert_eq!(cfg.resolve(None::<usize>, "train", "batch_size", 32).unwrap(), 32);
    }

    #[test]
    fn eps_rational_parses_to_nearest_f32() {
        let e = EpsValue::parse("8/255").unwrap();
        assert_eq!(e.value, 8.0f32 / 255.0f32);
        assert_eq!(e.text, "8/255");
        let d = EpsValue::parse("0.05").unwrap();
        assert_eq!(d.value, 0.05f32);
        assert!(EpsValue::parse("2").is_err());
        assert!(EpsValue::parse("1/0").is_err());
        let list = EpsValue::parse_list("4/255,8/255").unwrap();
        assert_eq!(list.len(), 2);
    }
}
