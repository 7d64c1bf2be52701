//! Flat, namespaced run configuration.
//!
//! Values resolve in order: declared defaults, `--config` files, `--set`
//! pairs, then dedicated flags. The resolved map goes into every output
//! header, so a run can be repeated with `--config <its output>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

/// Keys that describe where a run writes, not what it computes; they are
/// not recorded in output headers.
const UNRECORDED: [&str; 2] = ["io.output", "io.curve"];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new(defaults: &[(&str, &str)]) -> Self {
        Self {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Takes every declared key found as `key=value` or `# key=value` in a
    /// text file, or in the header of a binary timestamp file. Undeclared
    /// keys are ignored so any output header can serve as a config.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if bytes.starts_with(mandelq::format::BINARY_MAGIC) {
            let file = mandelq::format::decode_binary(&bytes).map_err(|e| CliError::data(path, e))?;
            for (k, v) in file.extra {
                self.values.entry(k).and_modify(|old| *old = v);
            }
            return Ok(());
        }
        let text = String::from_utf8_lossy(&bytes);
        for line in text.lines() {
            let line = line.trim_start_matches('#').trim();
            if let Some((k, v)) = line.split_once('=') {
                if let Some(slot) = self.values.get_mut(k.trim()) {
                    *slot = v.trim().to_string();
                }
            }
        }
        Ok(())
    }

    /// Applies a `--set key=value` pair; unknown keys are usage errors.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{pair}'")))?;
        let k = k.trim();
        match self.values.get_mut(k) {
            Some(slot) => {
                *slot = v.trim().to_string();
                Ok(())
            }
            None => {
                let known: Vec<&str> = self.values.keys().map(String::as_str).collect();
                Err(CliError::Usage(format!("unknown key '{k}' (known: {})", known.join(", "))))
            }
        }
    }

    /// Sets a declared key from a dedicated flag.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let slot = self.values.get_mut(key).unwrap_or_else(|| panic!("undeclared key {key}"));
        *slot = value.into();
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn is_set(&self, key: &str) -> bool {
        let v = self.str(key);
        !v.is_empty() && v != "none"
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse()
            .map_err(|_| CliError::Usage(format!("{key}: expected {what}, got '{v}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parse(key, "a number")
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        let v = self.str(key);
        // accept 1e8-style integers
        match v.parse::<u64>() {
            Ok(n) => Ok(n),
            Err(_) => match v.parse::<f64>() {
                Ok(f) if f >= 0.0 && f.fract() == 0.0 && f < 1.8e19 => Ok(f as u64),
                _ => Err(CliError::Usage(format!("{key}: expected a non-negative integer, got '{v}'"))),
            },
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        Ok(self.u64(key)? as usize)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parse(key, "true or false")
    }

    pub fn ps(&self, key: &str) -> Result<u64, CliError> {
        parse_duration(self.str(key)).map_err(|e| CliError::Usage(format!("{key}: {e}")))
    }

    /// A duration, or `None` when the key is empty or `none`.
    pub fn opt_ps(&self, key: &str) -> Result<Option<u64>, CliError> {
        if self.is_set(key) {
            self.ps(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn ps_list(&self, key: &str) -> Result<Vec<u64>, CliError> {
        split_list(self.str(key))
            .map(|s| parse_duration(s).map_err(|e| CliError::Usage(format!("{key}: {e}"))))
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        split_list(self.str(key))
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("{key}: expected numbers, got '{s}'")))
            })
            .collect()
    }

    /// `lo:hi:n` with duration endpoints, expanded to `n` log-spaced values.
    pub fn ps_grid(&self, key: &str) -> Result<Vec<u64>, CliError> {
        let (lo, hi, n) = self.grid_parts(key, |s| parse_duration(s).map(|v| v as f64))?;
        let mut v: Vec<u64> = log_grid(lo, hi, n).into_iter().map(|t| t.round() as u64).collect();
        v.dedup();
        Ok(v)
    }

    /// `lo:hi:n` of plain numbers, expanded to `n` log-spaced values.
    pub fn f64_grid(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let (lo, hi, n) = self.grid_parts(key, |s| s.parse::<f64>().map_err(|e| e.to_string()))?;
        Ok(log_grid(lo, hi, n))
    }

    fn grid_parts(
        &self,
        key: &str,
        endpoint: impl Fn(&str) -> Result<f64, String>,
    ) -> Result<(f64, f64, usize), CliError> {
        let v = self.str(key);
        let bad = |why: String| CliError::Usage(format!("{key}: expected lo:hi:n, {why}"));
        let parts: Vec<&str> = v.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad(format!("got '{v}'")));
        }
        let lo = endpoint(parts[0]).map_err(bad)?;
        let hi = endpoint(parts[1]).map_err(bad)?;
        let n: usize = parts[2].parse().map_err(|_| bad(format!("bad count '{}'", parts[2])))?;
        if !(lo > 0.0 && hi >= lo && n >= 1) || (n == 1 && hi != lo) {
            return Err(bad(format!("need 0 < lo <= hi and n >= 1, got '{v}'")));
        }
        Ok((lo, hi, n))
    }

    /// The recorded configuration, with `cmd` naming the subcommand.
    pub fn header(&self, cmd: &str) -> BTreeMap<String, String> {
        let mut h: BTreeMap<String, String> = self
            .values
            .iter()
            .filter(|(k, _)| !UNRECORDED.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        h.insert("cmd".into(), cmd.into());
        h
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (r * i as f64).exp()).collect()
}

/// Parses `80ns`, `1.5 us`, `100` (ps) and so on into whole picoseconds.
pub fn parse_duration(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
        .unwrap_or(s.len());
    let (num, unit) = (s[..split].trim(), s[split..].trim());
    let scale = unit_scale(unit).ok_or_else(|| format!("unknown time unit '{unit}' in '{s}' (ps, ns, us, ms, s)"))?;
    if let Ok(n) = num.parse::<u64>() {
        return n
            .checked_mul(scale)
            .ok_or_else(|| format!("duration '{s}' overflows 64-bit picoseconds"));
    }
    let v: f64 = num.parse().map_err(|_| format!("invalid duration '{s}'"))?;
    let ps = v * scale as f64;
    if !(ps >= 0.0 && ps < u64::MAX as f64) {
        return Err(format!("duration '{s}' out of range"));
    }
    let rounded = ps.round();
    if (ps - rounded).abs() > 1e-6 * ps.max(1.0) {
        return Err(format!("duration '{s}' is not a whole number of picoseconds"));
    }
    Ok(rounded as u64)
}

fn unit_scale(unit: &str) -> Option<u64> {
    Some(match unit {
        "" | "ps" => 1,
        "ns" => 1_000,
        "us" | "µs" => 1_000_000,
        "ms" => 1_000_000_000,
        "s" => 1_000_000_000_000,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_canonicalize_to_ps() {
        assert_eq!(parse_duration("80ns"), Ok(80_000));
        assert_eq!(parse_duration("1.5 us"), Ok(1_500_000));
        assert_eq!(parse_duration("0.1ns"), Ok(100));
        assert_eq!(parse_duration("250"), Ok(250));
        assert_eq!(parse_duration("1e3ns"), Ok(1_000_000));
        assert_eq!(parse_duration("2s"), Ok(2_000_000_000_000));
        assert!(parse_duration("0.5ps").is_err());
        assert!(parse_duration("3 min").is_err());
        assert!(parse_duration("-1ns").is_err());
    }

    #[test]
    fn set_rejects_unknown_keys() {
        let mut c = Config::new(&[("q.k_max", "1")]);
        assert!(c.set_pair("q.k_max=5").is_ok());
        assert_eq!(c.u64("q.k_max").unwrap(), 5);
        assert!(matches!(c.set_pair("q.nope=1"), Err(CliError::Usage(_))));
        assert!(matches!(c.set_pair("novalue"), Err(CliError::Usage(_))));
    }

    #[test]
    fn integers_accept_exponent_form() {
        let c = Config::new(&[("k", "1e8")]);
        assert_eq!(c.u64("k").unwrap(), 100_000_000);
    }

    #[test]
    fn header_omits_output_paths() {
        let c = Config::new(&[("io.output", "x"), ("q.k_max", "1")]);
        let h = c.header("q");
        assert!(!h.contains_key("io.output"));
        assert_eq!(h["cmd"], "q");
    }
}
