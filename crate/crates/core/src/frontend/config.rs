//! `.vmcfg` files: `key = value` lines with `#` comments.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MANDATORY_HANDLERS: [&str; 3] = ["boot", "reboot", "sleep"];
pub const PAGE_SIZES: [u32; 4] = [16, 32, 64, 128];
/// Addresses are stored in single 16-bit words.
pub const MAX_NVM_BYTES: u32 = 65536;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config error in `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Optimization {
    BlockFusion,
    LoopOpt,
}

impl FromStr for Optimization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "block_fusion" | "fusion" => Ok(Optimization::BlockFusion),
            "loop_opt" | "loop" => Ok(Optimization::LoopOpt),
            other => Err(format!("unknown optimization `{other}`")),
        }
    }
}

impl fmt::Display for Optimization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimization::BlockFusion => "block_fusion",
            Optimization::LoopOpt => "loop_opt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Backend {
    #[default]
    Rewinding,
    JustInTime,
    Test,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rewinding" | "rewind" => Ok(Backend::Rewinding),
            "just_in_time" | "jit" | "justintime" => Ok(Backend::JustInTime),
            "test" => Ok(Backend::Test),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Rewinding => "rewinding",
            Backend::JustInTime => "jit",
            Backend::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmConfig {
    pub event_handlers: Vec<String>,
    pub platform_name: String,
    pub nvm_size_bytes: u32,
    pub event_queue_capacity: u32,
    pub page_size_bytes: u32,
    pub optimizations: BTreeSet<Optimization>,
    pub vm_backend: Backend,
    /// Iterations a self-loop may run inside one transaction under `LOOP_OPT`.
    pub loop_unroll: u32,
    /// Micro-step budget before a run is declared non-terminating.
    pub step_budget: u64,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            event_handlers: MANDATORY_HANDLERS.iter().map(|s| s.to_string()).collect(),
            platform_name: "sim".into(),
            nvm_size_bytes: 16384,
            event_queue_capacity: 16,
            page_size_bytes: 32,
            optimizations: BTreeSet::new(),
            vm_backend: Backend::Rewinding,
            loop_unroll: 8,
            step_budget: 100_000_000,
        }
    }
}

impl VmConfig {
    pub fn page_count(&self) -> u32 {
        self.nvm_size_bytes / self.page_size_bytes
    }

    pub fn has(&self, opt: Optimization) -> bool {
        self.optimizations.contains(&opt)
    }

    pub fn with_handlers<I, S>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for h in extra {
            let h = h.into();
            if !self.event_handlers.contains(&h) {
                self.event_handlers.push(h);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for h in MANDATORY_HANDLERS {
            if !self.event_handlers.iter().any(|e| e == h) {
                return Err(ConfigError::new("events", format!("missing mandatory handler `{h}`")));
            }
        }
        let mut seen = BTreeSet::new();
        for h in &self.event_handlers {
            if !seen.insert(h) {
                return Err(ConfigError::new("events", format!("handler `{h}` listed twice")));
            }
        }
        if !PAGE_SIZES.contains(&self.page_size_bytes) {
            return Err(ConfigError::new("page_size", "must be one of 16, 32, 64, 128"));
        }
        if self.nvm_size_bytes == 0 || self.nvm_size_bytes > MAX_NVM_BYTES {
            return Err(ConfigError::new("nvm_size", format!("must be in 1..={MAX_NVM_BYTES}")));
        }
        if self.nvm_size_bytes % self.page_size_bytes != 0 {
            return Err(ConfigError::new("page_size", "page size does not divide nvm_size"));
        }
        if self.event_queue_capacity == 0 {
            return Err(ConfigError::new("queue_capacity", "must be positive"));
        }
        if self.event_queue_capacity > 4096 {
            return Err(ConfigError::new("queue_capacity", "must be at most 4096"));
        }
        if self.loop_unroll == 0 {
            return Err(ConfigError::new("loop_unroll", "must be positive"));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<VmConfig, ConfigError> {
    let mut cfg = VmConfig::default();
    let mut saw_events = false;
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(line, "expected `key = value`"));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "events" => {
                saw_events = true;
                cfg.event_handlers = list(value).map(str::to_string).collect();
            }
            "platform" => cfg.platform_name = value.to_string(),
            "nvm_size" => cfg.nvm_size_bytes = number(key, value)?,
            "queue_capacity" => cfg.event_queue_capacity = number(key, value)?,
            "page_size" => cfg.page_size_bytes = number(key, value)?,
            "loop_unroll" => cfg.loop_unroll = number(key, value)?,
            "step_budget" => cfg.step_budget = number(key, value)?,
            "optimize" => {
                cfg.optimizations = list(value)
                    .map(|o| o.parse::<Optimization>().map_err(|e| ConfigError::new(key, e)))
                    .collect::<Result<_, _>>()?;
            }
            "backend" => {
                cfg.vm_backend = value.parse().map_err(|e: String| ConfigError::new(key, e))?;
            }
            other => return Err(ConfigError::new(other, "unknown key")),
        }
    }
    if !saw_events {
        return Err(ConfigError::new("events", "missing mandatory handler list"));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Inverse of [`parse_config`].
pub fn render_config(cfg: &VmConfig) -> String {
    let opts: Vec<String> = cfg.optimizations.iter().map(|o| o.to_string()).collect();
    format!(
        "events = {}\nplatform = {}\nnvm_size = {}\nqueue_capacity = {}\npage_size = {}\noptimize = {}\nbackend = {}\nloop_unroll = {}\nstep_budget = {}\n",
        cfg.event_handlers.join(", "),
        cfg.platform_name,
        cfg.nvm_size_bytes,
        cfg.event_queue_capacity,
        cfg.page_size_bytes,
        opts.join(", "),
        cfg.vm_backend,
        cfg.loop_unroll,
        cfg.step_budget,
    )
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse::<T>()
        .map_err(|_| ConfigError::new(key, format!("`{value}` is not a non-negative integer")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "events = boot, reboot, sleep, control\n";

    #[test]
    fn page_size_is_read() {
        let cfg = parse_config(&format!("{BASE}page_size = 32\n")).unwrap();
        assert_eq!(cfg.page_size_bytes, 32);
    }

    #[test]
    fn defaults_fill_omitted_keys() {
        let cfg = parse_config(BASE).unwrap();
        assert_eq!(cfg.page_size_bytes, 32);
        assert!(cfg.optimizations.is_empty());
        assert_eq!(cfg.vm_backend, Backend::Rewinding);
        assert_eq!(cfg.loop_unroll, 8);
    }

    #[test]
    fn missing_reboot_handler() {
        let err = parse_config("events = boot, sleep, control\n").unwrap_err();
        assert_eq!(err.key, "events");
        assert!(err.reason.contains("missing mandatory handler"), "{err}");
    }

    #[test]
    fn page_count_from_sizes() {
        let cfg = parse_config(&format!("{BASE}nvm_size = 4096\npage_size = 64\n")).unwrap();
        assert_eq!(cfg.page_count(), 64);
    }

    #[test]
    fn rejects_bad_values() {
        assert_eq!(parse_config(&format!("{BASE}nvm_size = lots\n")).unwrap_err().key, "nvm_size");
        assert_eq!(parse_config(&format!("{BASE}colour = red\n")).unwrap_err().key, "colour");
        assert_eq!(
            parse_config(&format!("{BASE}nvm_size = 4000\npage_size = 64\n")).unwrap_err().key,
            "page_size"
        );
        assert_eq!(parse_config(&format!("{BASE}page_size = 48\n")).unwrap_err().key, "page_size");
        assert_eq!(parse_config(&format!("{BASE}optimize = inline\n")).unwrap_err().key, "optimize");
        assert_eq!(parse_config(&format!("{BASE}queue_capacity = 0\n")).unwrap_err().key, "queue_capacity");
    }

    #[test]
    fn comments_and_lists() {
        let cfg = parse_config(&format!(
            "# app\n{BASE}optimize = block_fusion, loop_opt # both\nbackend = jit\n"
        ))
        .unwrap();
        assert!(cfg.has(Optimization::BlockFusion) && cfg.has(Optimization::LoopOpt));
        assert_eq!(cfg.vm_backend, Backend::JustInTime);
        assert_eq!(cfg.event_handlers.len(), 4);
    }

    #[test]
    fn render_round_trip() {
        let cfg = parse_config(&format!("{BASE}optimize = loop_opt\npage_size = 64\n")).unwrap();
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }
}
