//! Timestamp file formats.
//!
//! Text: `#`-prefixed `key=value` header lines followed by a `channel,time_ps`
//! column line and one record per line.
//!
//! Binary: a 16-byte header (`MQTS` magic, `u16` version, `u16` reserved,
//! `u64` metadata length, all little-endian), the metadata block as UTF-8
//! `key=value` lines, then 9-byte records (`u8` channel, `u64` LE time).
//!
//! Header keys are written in sorted order, so both formats round-trip
//! byte-for-byte once canonicalized.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::types::{Acquisition, DetectionRecord, ExcitationMode};

pub const BINARY_MAGIC: &[u8; 4] = b"MQTS";
pub const BINARY_VERSION: u16 = 1;
pub const BINARY_HEADER_LEN: usize = 16;
pub const BINARY_RECORD_LEN: usize = 9;
pub const TEXT_BANNER: &str = "# mandelq timestamps v1";
pub const TEXT_COLUMNS: &str = "channel,time_ps";

const RESERVED_KEYS: [&str; 7] = [
    "channels",
    "duration_ps",
    "mode",
    "power_uw",
    "seed",
    "tau_rep_ps",
    "trigger_channel",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" | "csv" => Ok(Format::Text),
            "binary" | "bin" => Ok(Format::Binary),
            other => Err(Error::config(format!("unknown format '{other}' (text|binary)"))),
        }
    }
}

/// An acquisition plus any extra header keys (resolved run configuration).
#[derive(Debug, Clone, PartialEq)]
pub struct TimestampFile {
    pub acquisition: Acquisition,
    pub extra: BTreeMap<String, String>,
}

impl TimestampFile {
    pub fn new(acquisition: Acquisition) -> Self {
        Self {
            acquisition,
            extra: BTreeMap::new(),
        }
    }

    /// Full canonical header: acquisition metadata merged with the extras.
    pub fn header(&self) -> BTreeMap<String, String> {
        let acq = &self.acquisition;
        let mut h = self.extra.clone();
        let channels: Vec<String> = acq.channels().iter().map(|c| c.to_string()).collect();
        h.insert("channels".into(), channels.join(","));
        h.insert("duration_ps".into(), acq.duration().to_string());
        match *acq.mode() {
            ExcitationMode::Cw { power_uw } => {
                h.insert("mode".into(), "cw".into());
                if let Some(p) = power_uw {
                    h.insert("power_uw".into(), format!("{p}"));
                }
            }
            ExcitationMode::Pulsed {
                tau_rep,
                trigger_channel,
            } => {
                h.insert("mode".into(), "pulsed".into());
                h.insert("tau_rep_ps".into(), tau_rep.to_string());
                h.insert("trigger_channel".into(), trigger_channel.to_string());
            }
        }
        if let Some(seed) = acq.seed() {
            h.insert("seed".into(), seed.to_string());
        }
        h
    }

    fn from_parts(header: BTreeMap<String, String>, records: Vec<DetectionRecord>) -> Result<Self> {
        let get = |k: &str| header.get(k).map(String::as_str);
        let parse_u64 = |k: &str, v: &str| -> Result<u64> {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("header {k}: expected unsigned integer, got '{v}'")))
        };
        let duration = match get("duration_ps") {
            Some(v) => parse_u64("duration_ps", v)?,
            None => return Err(Error::config("header is missing duration_ps")),
        };
        let mode = match get("mode").unwrap_or("cw") {
            "cw" => {
                let power_uw = match get("power_uw") {
                    Some(v) => Some(v.trim().parse::<f64>().map_err(|_| {
                        Error::config(format!("header power_uw: expected number, got '{v}'"))
                    })?),
                    None => None,
                };
                ExcitationMode::Cw { power_uw }
            }
            "pulsed" => {
                let tau_rep = match get("tau_rep_ps") {
                    Some(v) => parse_u64("tau_rep_ps", v)?,
                    None => return Err(Error::config("pulsed header is missing tau_rep_ps")),
                };
                let trigger_channel = match get("trigger_channel") {
                    Some(v) => parse_channel(v).map_err(Error::Config)?,
                    None => crate::types::TRIGGER_CHANNEL,
                };
                ExcitationMode::Pulsed {
                    tau_rep,
                    trigger_channel,
                }
            }
            other => return Err(Error::config(format!("header mode: expected cw|pulsed, got '{other}'"))),
        };
        let seed = match get("seed") {
            Some(v) => Some(parse_u64("seed", v)?),
            None => None,
        };
        let channels: Vec<u8> = match get("channels") {
            Some(v) if !v.trim().is_empty() => v
                .split(',')
                .map(|c| parse_channel(c).map_err(Error::Config))
                .collect::<Result<_>>()?,
            _ => {
                let mut set: std::collections::BTreeSet<u8> = records.iter().map(|r| r.channel).collect();
                if let Some(t) = mode.trigger_channel() {
                    set.insert(t);
                }
                set.into_iter().collect()
            }
        };
        let acquisition = Acquisition::new(duration, records, channels, mode, seed)?;
        let extra = header
            .into_iter()
            .filter(|(k, _)| !RESERVED_KEYS.contains(&k.as_str()))
            .collect();
        Ok(Self { acquisition, extra })
    }
}

fn parse_channel(s: &str) -> std::result::Result<u8, String> {
    let v: u64 = s
        .trim()
        .parse()
        .map_err(|_| format!("invalid channel '{}'", s.trim()))?;
    u8::try_from(v).map_err(|_| format!("channel {v} exceeds the 1-byte channel limit (255)"))
}

pub fn write_text<W: Write>(file: &TimestampFile, mut w: W) -> Result<()> {
    writeln!(w, "{TEXT_BANNER}")?;
    for (k, v) in file.header() {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "{TEXT_COLUMNS}")?;
    for r in file.acquisition.records() {
        writeln!(w, "{},{}", r.channel, r.time)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> Result<TimestampFile> {
    let mut header = BTreeMap::new();
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line == TEXT_COLUMNS {
            continue;
        }
        let (c, t) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected 'channel,time_ps', got '{line}'"),
        })?;
        let channel = parse_channel(c).map_err(|msg| Error::Parse { line: lineno, msg })?;
        let time = t.trim().parse::<u64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid time '{}'", t.trim()),
        })?;
        records.push(DetectionRecord { channel, time });
    }
    TimestampFile::from_parts(header, records)
}

pub fn write_binary<W: Write>(file: &TimestampFile, mut w: W) -> Result<()> {
    let mut meta = String::new();
    for (k, v) in file.header() {
        meta.push_str(&k);
        meta.push('=');
        meta.push_str(&v);
        meta.push('\n');
    }
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    let mut buf = [0u8; BINARY_RECORD_LEN];
    for r in file.acquisition.records() {
        buf[0] = r.channel;
        buf[1..].copy_from_slice(&r.time.to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<TimestampFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_binary(&bytes)
}

pub fn decode_binary(bytes: &[u8]) -> Result<TimestampFile> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            msg: format!("header needs {BINARY_HEADER_LEN} bytes"),
        });
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Truncated {
            offset: 0,
            msg: "bad magic, not a binary timestamp file".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BINARY_VERSION {
        return Err(Error::Truncated {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = (BINARY_HEADER_LEN as u64).saturating_add(meta_len);
    if meta_end > bytes.len() as u64 {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            msg: format!("metadata block declares {meta_len} bytes"),
        });
    }
    let meta_end = meta_end as usize;
    let meta = std::str::from_utf8(&bytes[BINARY_HEADER_LEN..meta_end]).map_err(|e| Error::Truncated {
        offset: (BINARY_HEADER_LEN + e.valid_up_to()) as u64,
        msg: "metadata is not UTF-8".into(),
    })?;
    let header: BTreeMap<String, String> = meta
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let body = &bytes[meta_end..];
    let rem = body.len() % BINARY_RECORD_LEN;
    if rem != 0 {
        let offset = (meta_end + body.len() - rem) as u64;
        return Err(Error::Truncated {
            offset,
            msg: format!("partial record of {rem} bytes"),
        });
    }
    let records = body
        .chunks_exact(BINARY_RECORD_LEN)
        .map(|c| DetectionRecord {
            channel: c[0],
            time: u64::from_le_bytes(c[1..].try_into().unwrap()),
        })
        .collect();
    TimestampFile::from_parts(header, records)
}

/// Reads either format, detecting binary by its magic bytes.
pub fn read_any(bytes: &[u8]) -> Result<TimestampFile> {
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(bytes)
    } else {
        read_text(bytes)
    }
}

pub fn write<W: Write>(file: &TimestampFile, format: Format, w: W) -> Result<()> {
    match format {
        Format::Text => write_text(file, w),
        Format::Binary => write_binary(file, w),
    }
}
