//! Flat sectioned key-value run configuration: diff-friendly, parsed
//! strictly (unknown sections or keys are errors), and serialized in a
//! canonical form that round-trips every value bit-identically.

use crate::grid::{Grid1D, Profile};
use crate::mobility::{Mobility, MobilityError};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing required section [{0}]")]
    MissingSection(&'static str),
    #[error("[{section}] missing key `{key}`")]
    MissingKey {
        section: &'static str,
        key: &'static str,
    },
    #[error("[{section}] {message}")]
    BadValue {
        section: &'static str,
        message: String,
    },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Mobility(#[from] MobilityError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum MobilitySpec {
    Linear,
    Power {
        beta: f64,
    },
    DoublePower {
        beta1: f64,
        beta2: f64,
        ceiling: f64,
    },
    /// Two-column text table (z, m(z)) with strictly increasing z.
    Custom {
        table: String,
    },
}

impl MobilitySpec {
    pub fn build(&self) -> Result<Mobility, ConfigError> {
        match self {
            MobilitySpec::Linear => Ok(Mobility::linear()),
            MobilitySpec::Power { beta } => Ok(Mobility::power(*beta)),
            MobilitySpec::DoublePower {
                beta1,
                beta2,
                ceiling,
            } => Ok(Mobility::double_power(*beta1, *beta2, *ceiling)),
            MobilitySpec::Custom { table } => {
                let text = std::fs::read_to_string(table).map_err(|e| ConfigError::Io {
                    path: table.clone(),
                    message: e.to_string(),
                })?;
                let mut zs = Vec::new();
                let mut ms = Vec::new();
                for (idx, raw) in text.lines().enumerate() {
                    let line = raw.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let mut parts = line.split([',', ' ', '\t']).filter(|p| !p.is_empty());
                    let z = parts.next().and_then(|p| p.parse::<f64>().ok());
                    let m = parts.next().and_then(|p| p.parse::<f64>().ok());
                    match (z, m) {
                        (Some(z), Some(m)) => {
                            zs.push(z);
                            ms.push(m);
                        }
                        _ => {
                            return Err(ConfigError::Parse {
                                line: idx + 1,
                                message: format!("bad table row `{raw}`"),
                            })
                        }
                    }
                }
                Ok(Mobility::custom(zs, ms)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSpec {
    pub kind: ProfileKind,
    /// Target mass; `None` keeps the raw profile mass.
    pub mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileKind {
    Constant,
    Cosine {
        base: f64,
        amplitude: f64,
        mode: u32,
    },
    Gaussian {
        center: f64,
        width: f64,
        height: f64,
    },
    Csv {
        path: String,
    },
}

impl ProfileSpec {
    pub fn to_profile(&self, grid: Grid1D) -> Result<Profile, ConfigError> {
        Ok(match &self.kind {
            ProfileKind::Constant => Profile::Constant {
                mass: self.mass.unwrap_or(1.0),
            },
            ProfileKind::Cosine {
                base,
                amplitude,
                mode,
            } => Profile::Cosine {
                base: *base,
                amplitude: *amplitude,
                mode: *mode,
            },
            ProfileKind::Gaussian {
                center,
                width,
                height,
            } => Profile::Gaussian {
                center: *center,
                width: *width,
                height: *height,
            },
            ProfileKind::Csv { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let mut values = Vec::new();
                for (idx, raw) in text.lines().enumerate() {
                    let line = raw.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    values.push(line.parse::<f64>().map_err(|_| ConfigError::Parse {
                        line: idx + 1,
                        message: format!("bad sample `{raw}`"),
                    })?);
                }
                let _ = grid; // cell-count check happens at load time
                Profile::Samples(values)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub length: f64,
    pub cells: usize,
    pub mobility: MobilitySpec,
    pub initial: ProfileSpec,
    /// Second endpoint for the distance computation.
    pub target: Option<ProfileSpec>,
    pub tau: f64,
    pub horizon: f64,
    /// Decreasing shift schedule; empty means "no cascade configured".
    pub delta_schedule: Vec<f64>,
    /// Auto-schedule level count when no explicit schedule is given.
    pub delta_levels: Option<usize>,
    pub tol: f64,
    pub tol_outer: f64,
    pub max_iter: usize,
    pub slices: Option<usize>,
    /// Entropy reference density override.
    pub s0: Option<f64>,
    pub oracle_tau: f64,
    /// Positivity floor of the reference integrator as a fraction of the
    /// mean density.
    pub oracle_floor_factor: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub output: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            length: 1.0,
            cells: 128,
            mobility: MobilitySpec::Linear,
            initial: ProfileSpec {
                kind: ProfileKind::Constant,
                mass: Some(1.0),
            },
            target: None,
            tau: 1e-3,
            horizon: 1e-2,
            delta_schedule: Vec::new(),
            delta_levels: None,
            tol: 1e-6,
            tol_outer: 1e-8,
            max_iter: 20_000,
            slices: None,
            s0: None,
            oracle_tau: 1e-4,
            oracle_floor_factor: 1e-3,
            seed: 42,
            deterministic: true,
            output: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> Grid1D {
        Grid1D::new(self.length, self.cells)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut sections: BTreeMap<String, Vec<(usize, String, String)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                    line: idx + 1,
                    message: "unterminated section header".into(),
                })?;
                current = Some(name.trim().to_string());
                sections.entry(current.clone().unwrap()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{raw}`"),
            })?;
            let section = current.clone().ok_or(ConfigError::Parse {
                line: idx + 1,
                message: "key outside any [section]".into(),
            })?;
            sections.entry(section).or_default().push((
                idx + 1,
                key.trim().to_string(),
                value.trim().to_string(),
            ));
        }

        let known = [
            "grid", "mobility", "initial", "target", "time", "delta", "solver", "oracle", "run",
        ];
        for name in sections.keys() {
            if !known.contains(&name.as_str()) {
                return Err(ConfigError::Parse {
                    line: 0,
                    message: format!("unknown section [{name}]"),
                });
            }
        }

        let mut cfg = RunConfig::default();
        let get = |sections: &BTreeMap<String, Vec<(usize, String, String)>>, name: &str| {
            sections.get(name).cloned().unwrap_or_default()
        };

        for (line, key, value) in get(&sections, "grid") {
            match key.as_str() {
                "length" => cfg.length = parse_f64(&value, line)?,
                "cells" => cfg.cells = parse_usize(&value, line)?,
                _ => return unknown_key("grid", &key, line),
            }
        }

        if !sections.contains_key("mobility") {
            return Err(ConfigError::MissingSection("mobility"));
        }
        let mut family = None;
        let (mut beta, mut beta1, mut beta2, mut ceiling, mut table) =
            (None, None, None, None, None);
        for (line, key, value) in get(&sections, "mobility") {
            match key.as_str() {
                "family" => family = Some(value),
                "beta" => beta = Some(parse_f64(&value, line)?),
                "beta1" => beta1 = Some(parse_f64(&value, line)?),
                "beta2" => beta2 = Some(parse_f64(&value, line)?),
                "ceiling" => ceiling = Some(parse_f64(&value, line)?),
                "table" => table = Some(value),
                _ => return unknown_key("mobility", &key, line),
            }
        }
        cfg.mobility = match family.as_deref() {
            Some("linear") => MobilitySpec::Linear,
            Some("power") => MobilitySpec::Power {
                beta: beta.ok_or(ConfigError::MissingKey {
                    section: "mobility",
                    key: "beta",
                })?,
            },
            Some("double_power") => MobilitySpec::DoublePower {
                beta1: beta1.ok_or(ConfigError::MissingKey {
                    section: "mobility",
                    key: "beta1",
                })?,
                beta2: beta2.ok_or(ConfigError::MissingKey {
                    section: "mobility",
                    key: "beta2",
                })?,
                ceiling: ceiling.ok_or(ConfigError::MissingKey {
                    section: "mobility",
                    key: "ceiling",
                })?,
            },
            Some("custom") => MobilitySpec::Custom {
                table: table.ok_or(ConfigError::MissingKey {
                    section: "mobility",
                    key: "table",
                })?,
            },
            Some(other) => {
                return Err(ConfigError::BadValue {
                    section: "mobility",
                    message: format!("unknown family `{other}`"),
                })
            }
            None => {
                return Err(ConfigError::MissingKey {
                    section: "mobility",
                    key: "family",
                })
            }
        };

        cfg.initial = parse_profile(&get(&sections, "initial"), "initial")?;
        if sections.contains_key("target") {
            cfg.target = Some(parse_profile(&get(&sections, "target"), "target")?);
        }

        for (line, key, value) in get(&sections, "time") {
            match key.as_str() {
                "tau" => cfg.tau = parse_f64(&value, line)?,
                "horizon" => cfg.horizon = parse_f64(&value, line)?,
                _ => return unknown_key("time", &key, line),
            }
        }

        for (line, key, value) in get(&sections, "delta") {
            match key.as_str() {
                "schedule" => {
                    cfg.delta_schedule = value
                        .split(',')
                        .map(|p| parse_f64(p.trim(), line))
                        .collect::<Result<_, _>>()?;
                }
                "levels" => cfg.delta_levels = Some(parse_usize(&value, line)?),
                _ => return unknown_key("delta", &key, line),
            }
        }

        for (line, key, value) in get(&sections, "solver") {
            match key.as_str() {
                "tol" => cfg.tol = parse_f64(&value, line)?,
                "tol_outer" => cfg.tol_outer = parse_f64(&value, line)?,
                "max_iter" => cfg.max_iter = parse_usize(&value, line)?,
                "slices" => cfg.slices = Some(parse_usize(&value, line)?),
                "s0" => cfg.s0 = Some(parse_f64(&value, line)?),
                _ => return unknown_key("solver", &key, line),
            }
        }

        for (line, key, value) in get(&sections, "oracle") {
            match key.as_str() {
                "tau" => cfg.oracle_tau = parse_f64(&value, line)?,
                "floor" => cfg.oracle_floor_factor = parse_f64(&value, line)?,
                _ => return unknown_key("oracle", &key, line),
            }
        }

        for (line, key, value) in get(&sections, "run") {
            match key.as_str() {
                "seed" => cfg.seed = parse_usize(&value, line)? as u64,
                "deterministic" => {
                    cfg.deterministic = match value.as_str() {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(ConfigError::Parse {
                                line,
                                message: format!("expected true/false, got `{value}`"),
                            })
                        }
                    }
                }
                "output" => cfg.output = value,
                _ => return unknown_key("run", &key, line),
            }
        }

        if !(cfg.tol > 0.0 && cfg.tol_outer > 0.0) {
            return Err(ConfigError::BadValue {
                section: "solver",
                message: "tolerances must be positive".into(),
            });
        }
        if cfg.horizon < cfg.tau {
            return Err(ConfigError::BadValue {
                section: "time",
                message: format!("horizon {} below tau {}", cfg.horizon, cfg.tau),
            });
        }
        if !cfg.delta_schedule.is_empty()
            && cfg
                .delta_schedule
                .windows(2)
                .any(|w| w[1] >= w[0] || w[0] <= 0.0)
        {
            return Err(ConfigError::BadValue {
                section: "delta",
                message: "schedule must be strictly decreasing and positive".into(),
            });
        }
        Ok(cfg)
    }

    /// Canonical serialization; `parse` of the output reproduces every field
    /// bit-identically (floats use the shortest round-trip form).
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fisherflow run configuration (schema config/1)");
        let _ = writeln!(s, "[grid]");
        let _ = writeln!(s, "length = {:?}", self.length);
        let _ = writeln!(s, "cells = {}", self.cells);
        let _ = writeln!(s, "\n[mobility]");
        match &self.mobility {
            MobilitySpec::Linear => {
                let _ = writeln!(s, "family = linear");
            }
            MobilitySpec::Power { beta } => {
                let _ = writeln!(s, "family = power");
                let _ = writeln!(s, "beta = {beta:?}");
            }
            MobilitySpec::DoublePower {
                beta1,
                beta2,
                ceiling,
            } => {
                let _ = writeln!(s, "family = double_power");
                let _ = writeln!(s, "beta1 = {beta1:?}");
                let _ = writeln!(s, "beta2 = {beta2:?}");
                let _ = writeln!(s, "ceiling = {ceiling:?}");
            }
            MobilitySpec::Custom { table } => {
                let _ = writeln!(s, "family = custom");
                let _ = writeln!(s, "table = {table}");
            }
        }
        let _ = writeln!(s, "\n[initial]");
        serialize_profile(&mut s, &self.initial);
        if let Some(target) = &self.target {
            let _ = writeln!(s, "\n[target]");
            serialize_profile(&mut s, target);
        }
        let _ = writeln!(s, "\n[time]");
        let _ = writeln!(s, "tau = {:?}", self.tau);
        let _ = writeln!(s, "horizon = {:?}", self.horizon);
        if !self.delta_schedule.is_empty() || self.delta_levels.is_some() {
            let _ = writeln!(s, "\n[delta]");
            if !self.delta_schedule.is_empty() {
                let parts: Vec<String> = self
                    .delta_schedule
                    .iter()
                    .map(|d| format!("{d:?}"))
                    .collect();
                let _ = writeln!(s, "schedule = {}", parts.join(","));
            }
            if let Some(levels) = self.delta_levels {
                let _ = writeln!(s, "levels = {levels}");
            }
        }
        let _ = writeln!(s, "\n[solver]");
        let _ = writeln!(s, "tol = {:?}", self.tol);
        let _ = writeln!(s, "tol_outer = {:?}", self.tol_outer);
        let _ = writeln!(s, "max_iter = {}", self.max_iter);
        if let Some(ns) = self.slices {
            let _ = writeln!(s, "slices = {ns}");
        }
        if let Some(s0) = self.s0 {
            let _ = writeln!(s, "s0 = {s0:?}");
        }
        let _ = writeln!(s, "\n[oracle]");
        let _ = writeln!(s, "tau = {:?}", self.oracle_tau);
        let _ = writeln!(s, "floor = {:?}", self.oracle_floor_factor);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "output = {}", self.output);
        s
    }

    /// FNV-1a hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("fnv1a:{h:016x}")
    }
}

fn serialize_profile(s: &mut String, p: &ProfileSpec) {
    match &p.kind {
        ProfileKind::Constant => {
            let _ = writeln!(s, "profile = constant");
        }
        ProfileKind::Cosine {
            base,
            amplitude,
            mode,
        } => {
            let _ = writeln!(s, "profile = cosine");
            let _ = writeln!(s, "base = {base:?}");
            let _ = writeln!(s, "amplitude = {amplitude:?}");
            let _ = writeln!(s, "mode = {mode}");
        }
        ProfileKind::Gaussian {
            center,
            width,
            height,
        } => {
            let _ = writeln!(s, "profile = gaussian");
            let _ = writeln!(s, "center = {center:?}");
            let _ = writeln!(s, "width = {width:?}");
            let _ = writeln!(s, "height = {height:?}");
        }
        ProfileKind::Csv { path } => {
            let _ = writeln!(s, "profile = csv");
            let _ = writeln!(s, "csv = {path}");
        }
    }
    if let Some(mass) = p.mass {
        let _ = writeln!(s, "mass = {mass:?}");
    }
}

fn parse_profile(
    entries: &[(usize, String, String)],
    section: &'static str,
) -> Result<ProfileSpec, ConfigError> {
    let mut profile = None;
    let mut mass = None;
    let (mut base, mut amplitude, mut mode) = (1.0, 0.5, 1u32);
    let (mut center, mut width, mut height) = (0.5, 0.1, 1.0);
    let mut csv = None;
    for (line, key, value) in entries {
        match key.as_str() {
            "profile" => profile = Some(value.clone()),
            "mass" => mass = Some(parse_f64(value, *line)?),
            "base" => base = parse_f64(value, *line)?,
            "amplitude" => amplitude = parse_f64(value, *line)?,
            "mode" => mode = parse_usize(value, *line)? as u32,
            "center" => center = parse_f64(value, *line)?,
            "width" => width = parse_f64(value, *line)?,
            "height" => height = parse_f64(value, *line)?,
            "csv" => csv = Some(value.clone()),
            _ => return unknown_key(section, key, *line),
        }
    }
    let kind = match profile.as_deref() {
        None | Some("constant") => ProfileKind::Constant,
        Some("cosine") => ProfileKind::Cosine {
            base,
            amplitude,
            mode,
        },
        Some("gaussian") => ProfileKind::Gaussian {
            center,
            width,
            height,
        },
        Some("csv") => ProfileKind::Csv {
            path: csv.ok_or(ConfigError::MissingKey {
                section,
                key: "csv",
            })?,
        },
        Some(other) => {
            return Err(ConfigError::BadValue {
                section,
                message: format!("unknown profile `{other}`"),
            })
        }
    };
    Ok(ProfileSpec { kind, mass })
}

fn parse_f64(value: &str, line: usize) -> Result<f64, ConfigError> {
    value.parse::<f64>().map_err(|_| ConfigError::Parse {
        line,
        message: format!("expected a number, got `{value}`"),
    })
}

fn parse_usize(value: &str, line: usize) -> Result<usize, ConfigError> {
    value.parse::<usize>().map_err(|_| ConfigError::Parse {
        line,
        message: format!("expected a nonnegative integer, got `{value}`"),
    })
}

fn unknown_key<T>(section: &'static str, key: &str, line: usize) -> Result<T, ConfigError> {
    Err(ConfigError::Parse {
        line,
        message: format!("unknown key `{key}` in [{section}]"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunConfig {
        RunConfig {
            length: 1.0,
            cells: 128,
            mobility: MobilitySpec::Power { beta: 0.8 },
            initial: ProfileSpec {
                kind: ProfileKind::Cosine {
                    base: 1.0,
                    amplitude: 0.5,
                    mode: 1,
                },
                mass: Some(1.0),
            },
            target: Some(ProfileSpec {
                kind: ProfileKind::Gaussian {
                    center: 0.45,
                    width: 0.1,
                    height: 2.0,
                },
                mass: Some(1.0),
            }),
            tau: 1e-3,
            horizon: 0.05,
            delta_schedule: vec![0.1, 0.05, 0.025],
            delta_levels: None,
            tol: 1e-6,
            tol_outer: 1e-8,
            max_iter: 12345,
            slices: Some(16),
            s0: None,
            oracle_tau: 2.5e-4,
            oracle_floor_factor: 1e-3,
            seed: 7,
            deterministic: true,
            output: "artifacts".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = sample();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // And a second pass produces the same bytes.
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn round_trip_survives_awkward_floats() {
        let mut cfg = sample();
        cfg.tau = 0.1 + 0.2; // 0.30000000000000004
        cfg.tol = f64::MIN_POSITIVE;
        cfg.horizon = 1.0 / 3.0;
        let back = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(cfg.tau.to_bits(), back.tau.to_bits());
        assert_eq!(cfg.tol.to_bits(), back.tol.to_bits());
        assert_eq!(cfg.horizon.to_bits(), back.horizon.to_bits());
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(RunConfig::parse("[mobility]\nfamily = linear\nwat = 1\n").is_err());
        assert!(RunConfig::parse("[mobility]\nfamily = linear\n\n[junk]\nx = 1\n").is_err());
        assert!(RunConfig::parse("x = 1\n").is_err());
    }

    #[test]
    fn missing_mobility_is_rejected() {
        assert!(matches!(
            RunConfig::parse("[grid]\ncells = 64\n"),
            Err(ConfigError::MissingSection("mobility"))
        ));
    }

    #[test]
    fn invalid_time_and_schedule_are_rejected() {
        let bad_time = "[mobility]\nfamily = linear\n[time]\ntau = 0.1\nhorizon = 0.01\n";
        assert!(RunConfig::parse(bad_time).is_err());
        let bad_schedule = "[mobility]\nfamily = linear\n[delta]\nschedule = 0.1,0.2\n";
        assert!(RunConfig::parse(bad_schedule).is_err());
    }

    #[test]
    fn hash_is_stable_and_value_sensitive() {
        let cfg = sample();
        let h1 = cfg.hash();
        assert_eq!(h1, sample().hash());
        let mut other = sample();
        other.seed = 8;
        assert_ne!(h1, other.hash());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# header\n\n[mobility]\n# comment\nfamily = power\nbeta = 0.8\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mobility, MobilitySpec::Power { beta: 0.8 });
    }
}
