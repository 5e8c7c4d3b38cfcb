use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::LazyLock;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// CPU architecture from the ELF `e_machine` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Arch {
    X86_64,
    Arm32,
    Unknown(u16),
}

impl Arch {
    pub const EM_ARM: u16 = 40;
    pub const EM_X86_64: u16 = 62;

    pub fn from_machine(machine: u16) -> Self {
        match machine {
            Self::EM_ARM => Arch::Arm32,
            Self::EM_X86_64 => Arch::X86_64,
            other => Arch::Unknown(other),
        }
    }

    /// Architecture of the machine this process runs on.
    pub fn host() -> Self {
        match std::env::consts::ARCH {
            "x86_64" => Arch::X86_64,
            "arm" => Arch::Arm32,
            _ => Arch::Unknown(0),
        }
    }

    /// Name of the user-mode emulator binary for this architecture.
    pub fn emulator(&self) -> Option<&'static str> {
        match self {
            Arch::X86_64 => Some("qemu-x86_64"),
            Arch::Arm32 => Some("qemu-arm"),
            Arch::Unknown(_) => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::X86_64 => f.write_str("X86_64"),
            Arch::Arm32 => f.write_str("ARM_32"),
            Arch::Unknown(code) => write!(f, "UNKNOWN({code})"),
        }
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "X86_64" | "X86-64" | "AMD64" => Ok(Arch::X86_64),
            "ARM_32" | "ARM32" | "ARM" => Ok(Arch::Arm32),
            other => parse_tagged(other, "UNKNOWN")
                .map(Arch::Unknown)
                .ok_or_else(|| format!("unrecognized architecture {s:?}")),
        }
    }
}

impl From<Arch> for String {
    fn from(a: Arch) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Arch {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Terminating signal of a crashed process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CrashSignal {
    Segv,
    Abrt,
    Bus,
    Fpe,
    Ill,
    Other(i32),
}

impl CrashSignal {
    pub fn from_raw(signo: i32) -> Self {
        match signo {
            libc::SIGSEGV => CrashSignal::Segv,
            libc::SIGABRT => CrashSignal::Abrt,
            libc::SIGBUS => CrashSignal::Bus,
            libc::SIGFPE => CrashSignal::Fpe,
            libc::SIGILL => CrashSignal::Ill,
            other => CrashSignal::Other(other),
        }
    }

    /// Maps a debugger-style name such as `SIGSEGV` or `SEGV`.
    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.trim().trim_start_matches("SIG");
        Some(match name {
            "SEGV" => CrashSignal::Segv,
            "ABRT" | "IOT" => CrashSignal::Abrt,
            "BUS" => CrashSignal::Bus,
            "FPE" => CrashSignal::Fpe,
            "ILL" => CrashSignal::Ill,
            "TRAP" => CrashSignal::Other(libc::SIGTRAP),
            "SYS" => CrashSignal::Other(libc::SIGSYS),
            "KILL" => CrashSignal::Other(libc::SIGKILL),
            _ => return None,
        })
    }

    pub fn raw(&self) -> i32 {
        match self {
            CrashSignal::Segv => libc::SIGSEGV,
            CrashSignal::Abrt => libc::SIGABRT,
            CrashSignal::Bus => libc::SIGBUS,
            CrashSignal::Fpe => libc::SIGFPE,
            CrashSignal::Ill => libc::SIGILL,
            CrashSignal::Other(code) => *code,
        }
    }

    /// True for the signals counted as crashes during replay.
    pub fn is_crash(&self) -> bool {
        !matches!(self, CrashSignal::Other(_))
    }
}

impl fmt::Display for CrashSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrashSignal::Segv => f.write_str("SEGV"),
            CrashSignal::Abrt => f.write_str("ABRT"),
            CrashSignal::Bus => f.write_str("BUS"),
            CrashSignal::Fpe => f.write_str("FPE"),
            CrashSignal::Ill => f.write_str("ILL"),
            CrashSignal::Other(code) => write!(f, "OTHER({code})"),
        }
    }
}

impl FromStr for CrashSignal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        if let Some(code) = parse_tagged(&upper, "OTHER") {
            return Ok(CrashSignal::Other(code));
        }
        CrashSignal::from_name(&upper).ok_or_else(|| format!("unrecognized signal {s:?}"))
    }
}

impl From<CrashSignal> for String {
    fn from(s: CrashSignal) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for CrashSignal {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

fn parse_tagged<T: FromStr>(s: &str, tag: &str) -> Option<T> {
    s.strip_prefix(tag)?
        .strip_prefix('(')?
        .strip_suffix(')')?
        .parse()
        .ok()
}

static VERSION_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^v?(\d+)\.(\d+)(?:\.(\d+))?$").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a version string: {0:?}")]
pub struct VersionParseError(pub String);

/// A dotted component version such as `1.36.1`.
///
/// Equality and ordering look only at the numeric triple; `raw` keeps the
/// text exactly as it was matched. A missing patch level sorts before any
/// present one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VersionInfo {
    pub major: u32,
    pub minor: u32,
    pub patch: Option<u32>,
    pub raw: String,
}

impl VersionInfo {
    pub fn new(major: u32, minor: u32, patch: Option<u32>) -> Self {
        let raw = match patch {
            Some(p) => format!("{major}.{minor}.{p}"),
            None => format!("{major}.{minor}"),
        };
        Self {
            major,
            minor,
            patch,
            raw,
        }
    }

    fn key(&self) -> (u32, u32, i64) {
        (self.major, self.minor, self.patch.map_or(-1, i64::from))
    }
}

impl FromStr for VersionInfo {
    type Err = VersionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let caps = VERSION_RE
            .captures(s)
            .ok_or_else(|| VersionParseError(s.to_string()))?;
        let num = |i: usize| -> Result<Option<u32>, VersionParseError> {
            caps.get(i)
                .map(|m| m.as_str().parse::<u32>())
                .transpose()
                .map_err(|_| VersionParseError(s.to_string()))
        };
        Ok(VersionInfo {
            major: num(1)?.unwrap_or_default(),
            minor: num(2)?.unwrap_or_default(),
            patch: num(3)?,
            raw: s.to_string(),
        })
    }
}

impl fmt::Display for VersionInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.patch {
            Some(p) => write!(f, "v{}.{}.{}", self.major, self.minor, p),
            None => write!(f, "v{}.{}", self.major, self.minor),
        }
    }
}

impl PartialEq for VersionInfo {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for VersionInfo {}

impl Hash for VersionInfo {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl PartialOrd for VersionInfo {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VersionInfo {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}
