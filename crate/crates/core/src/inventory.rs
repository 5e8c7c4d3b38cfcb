//! Firmware-tree inventory: find ELF executables, fingerprint them and pull
//! out the embedded component version.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::report::Tabular;
use crate::{sha256_hex, Arch, VersionInfo};

pub const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];

/// Shortest printable run considered, as in `strings(1)`.
pub const MIN_STRING_RUN: usize = 4;

static BUSYBOX_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"BusyBox v(\d+\.\d+(?:\.\d+)?)").unwrap());

#[derive(Debug, thiserror::Error)]
pub enum InventoryError {
    #[error("cannot read scan root {path}: {source}")]
    Root { path: PathBuf, source: io::Error },
}

/// An executable found in the scanned tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetBinary {
    pub path: PathBuf,
    pub content_hash: String,
    pub arch: Arch,
    pub component: Option<String>,
    pub version: Option<VersionInfo>,
    pub size_bytes: u64,
}

impl TargetBinary {
    /// Fingerprints the file at `path` without the directory walk.
    pub fn from_path(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(path.to_path_buf(), &bytes))
    }

    pub fn from_bytes(path: PathBuf, bytes: &[u8]) -> Self {
        let (component, version) = match extract_version(bytes) {
            Some((c, v)) => (Some(c), Some(v)),
            None => (None, None),
        };
        TargetBinary {
            path,
            content_hash: fingerprint(bytes),
            arch: elf_arch(bytes),
            component,
            version,
            size_bytes: bytes.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanDiagnostic {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub targets: Vec<TargetBinary>,
    pub diagnostics: Vec<ScanDiagnostic>,
}

/// Walks `root` (without following symlinks) and returns every regular ELF
/// file, sorted by path. Files that cannot be read are reported in
/// `diagnostics` and otherwise skipped.
pub fn scan_filesystem(root: &Path, max_depth: usize) -> Result<ScanOutcome, InventoryError> {
    std::fs::read_dir(root).map_err(|source| InventoryError::Root {
        path: root.to_path_buf(),
        source,
    })?;

    let mut out = ScanOutcome::default();
    let walker = WalkDir::new(root)
        .follow_links(false)
        .max_depth(max_depth)
        .sort_by_file_name();
    for entry in walker {
        let entry = match entry {
            Ok(e) => e,
            Err(err) => {
                out.diagnostics.push(ScanDiagnostic {
                    path: err.path().map(Path::to_path_buf).unwrap_or_default(),
                    message: err.to_string(),
                });
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        match read_if_elf(entry.path()) {
            Ok(Some(bytes)) => out
                .targets
                .push(TargetBinary::from_bytes(entry.path().to_path_buf(), &bytes)),
            Ok(None) => {}
            Err(err) => out.diagnostics.push(ScanDiagnostic {
                path: entry.path().to_path_buf(),
                message: err.to_string(),
            }),
        }
    }
    out.targets.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn read_if_elf(path: &Path) -> io::Result<Option<Vec<u8>>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < magic.len() {
        let n = file.read(&mut magic[filled..])?;
        if n == 0 {
            return Ok(None);
        }
        filled += n;
    }
    if magic != ELF_MAGIC {
        return Ok(None);
    }
    let mut bytes = magic.to_vec();
    file.read_to_end(&mut bytes)?;
    Ok(Some(bytes))
}

/// Architecture from the ELF header's `e_machine` field. Truncated or
/// non-ELF input maps to `Unknown(0)`.
pub fn elf_arch(bytes: &[u8]) -> Arch {
    if bytes.len() < 20 || bytes[..4] != ELF_MAGIC {
        return Arch::Unknown(0);
    }
    let field = [bytes[18], bytes[19]];
    let machine = match bytes[5] {
        2 => u16::from_be_bytes(field),
        _ => u16::from_le_bytes(field),
    };
    Arch::from_machine(machine)
}

/// Lowercase hex SHA-256 of the file contents.
pub fn fingerprint(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

fn is_printable(b: u8) -> bool {
    b == b'\t' || (0x20..=0x7e).contains(&b)
}

/// Iterates over maximal printable runs of at least `min_len` bytes.
pub fn printable_runs(bytes: &[u8], min_len: usize) -> impl Iterator<Item = &[u8]> {
    bytes
        .split(|b| !is_printable(*b))
        .filter(move |run| run.len() >= min_len)
}

/// First `BusyBox vX.Y[.Z]` marker in file order.
pub fn extract_version(bytes: &[u8]) -> Option<(String, VersionInfo)> {
    printable_runs(bytes, MIN_STRING_RUN).find_map(|run| {
        let caps = BUSYBOX_MARKER.captures(run)?;
        let text = std::str::from_utf8(caps.get(1)?.as_bytes()).ok()?;
        let version = text.parse().ok()?;
        Some(("busybox".to_string(), version))
    })
}

/// One row of the version table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRow {
    pub component: String,
    pub version: Option<VersionInfo>,
    /// Number of files.
    pub count: usize,
    /// Number of distinct content hashes among those files.
    pub unique_count: usize,
}

impl VersionRow {
    pub fn version_label(&self) -> String {
        self.version
            .as_ref()
            .map_or_else(|| "unknown".to_string(), ToString::to_string)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionTable {
    pub rows: Vec<VersionRow>,
    /// When set, the tabular `count` column reports distinct hashes.
    #[serde(default)]
    pub count_unique: bool,
}

pub fn inventory_report(targets: &[TargetBinary]) -> VersionTable {
    // None sorts before Some; the key flips it so unknown rows come last.
    type Key = (bool, String, Option<VersionInfo>);
    let mut groups: BTreeMap<Key, (usize, BTreeSet<&str>)> = BTreeMap::new();
    for t in targets {
        let key = match &t.version {
            Some(v) => (
                false,
                t.component.clone().unwrap_or_else(|| "unknown".into()),
                Some(v.clone()),
            ),
            None => (true, t.component.clone().unwrap_or_else(|| "unknown".into()), None),
        };
        let slot = groups.entry(key).or_default();
        slot.0 += 1;
        slot.1.insert(&t.content_hash);
    }
    VersionTable {
        rows: groups
            .into_iter()
            .map(|((_, component, version), (count, hashes))| VersionRow {
                component,
                version,
                count,
                unique_count: hashes.len(),
            })
            .collect(),
        count_unique: false,
    }
}

impl Tabular for VersionTable {
    fn header(&self) -> Vec<String> {
        vec!["component".into(), "version".into(), "count".into()]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let n = if self.count_unique { r.unique_count } else { r.count };
                vec![r.component.clone(), r.version_label(), n.to_string()]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn fake_elf(machine: u16, payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0u8; 64];
        b[..4].copy_from_slice(&ELF_MAGIC);
        b[4] = 1;
        b[5] = 1;
        b[18..20].copy_from_slice(&machine.to_le_bytes());
        b.extend_from_slice(payload);
        b
    }

    fn target(hash: &str, version: Option<&str>) -> TargetBinary {
        TargetBinary {
            path: PathBuf::from(hash),
            content_hash: hash.into(),
            arch: Arch::Arm32,
            component: version.map(|_| "busybox".into()),
            version: version.map(|v| v.parse().unwrap()),
            size_bytes: 1,
        }
    }

    #[test]
    fn arm_elf_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bb"), fake_elf(40, b"\0BusyBox v1.33.0 (2021)\0")).unwrap();
        let out = scan_filesystem(dir.path(), 8).unwrap();
        assert_eq!(out.targets.len(), 1);
        assert_eq!(out.targets[0].arch, Arch::Arm32);
        assert_eq!(out.targets[0].version, Some("1.33.0".parse().unwrap()));
    }

    #[test]
    fn big_endian_machine_field() {
        let mut b = fake_elf(0, b"");
        b[5] = 2;
        b[18..20].copy_from_slice(&40u16.to_be_bytes());
        assert_eq!(elf_arch(&b), Arch::Arm32);
        assert_eq!(elf_arch(b"\x7fELF"), Arch::Unknown(0));
    }

    #[test]
    fn empty_and_text_only_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_filesystem(dir.path(), 8).unwrap().targets.is_empty());
        std::fs::write(dir.path().join("hello.txt"), "hello").unwrap();
        std::fs::write(dir.path().join("short"), "\x7fE").unwrap();
        assert!(scan_filesystem(dir.path(), 8).unwrap().targets.is_empty());
    }

    #[test]
    fn missing_root_is_an_error() {
        assert!(scan_filesystem(Path::new("/nonexistent/firmware"), 4).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn symlinks_not_followed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bb"), fake_elf(62, b"")).unwrap();
        std::os::unix::fs::symlink(dir.path().join("bb"), dir.path().join("link")).unwrap();
        std::os::unix::fs::symlink(dir.path(), dir.path().join("loop")).unwrap();
        let out = scan_filesystem(dir.path(), 16).unwrap();
        assert_eq!(out.targets.len(), 1);
    }

    #[test]
    fn version_examples() {
        let (c, v) = extract_version(b"junk\0\x01...BusyBox v1.36.1 (2023-06-20)...\0").unwrap();
        assert_eq!(c, "busybox");
        assert_eq!((v.major, v.minor, v.patch), (1, 36, Some(1)));
        let (_, v) = extract_version(b"BusyBox v1.33.0").unwrap();
        assert_eq!(v, VersionInfo::new(1, 33, Some(0)));
        assert!(extract_version(b"no marker here at all").is_none());
    }

    #[test]
    fn first_marker_wins() {
        let (_, v) = extract_version(b"BusyBox v1.20.2\0\0BusyBox v1.36.1").unwrap();
        assert_eq!(v.raw, "1.20.2");
    }

    #[test]
    fn hashes_distinguish_single_bit_flips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let base: Vec<u8> = (0..256).map(|_| rng.random()).collect();
        let h0 = fingerprint(&base);
        assert_eq!(h0, fingerprint(&base));
        for _ in 0..100 {
            let mut flipped = base.clone();
            let bit = rng.random_range(0..base.len() * 8);
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(fingerprint(&flipped), h0);
        }
    }

    #[test]
    fn report_examples() {
        assert!(inventory_report(&[]).rows.is_empty());
        let t = inventory_report(&[
            target("a", Some("1.10.2")),
            target("b", Some("1.7.2")),
            target("c", Some("1.7.2")),
        ]);
        let rows: Vec<_> = t.rows.iter().map(|r| (r.version_label(), r.count)).collect();
        assert_eq!(rows, vec![("v1.7.2".into(), 2), ("v1.10.2".into(), 1)]);

        let t = inventory_report(&[target("x", None)]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!((t.rows[0].version_label().as_str(), t.rows[0].count), ("unknown", 1));
    }

    #[test]
    fn duplicate_hashes_counted_both_ways() {
        let t = inventory_report(&[target("same", Some("1.22.1")), target("same", Some("1.22.1"))]);
        assert_eq!((t.rows[0].count, t.rows[0].unique_count), (2, 1));
    }

    proptest! {
        #[test]
        fn marker_found_inside_binary_padding(
            a in proptest::collection::vec(prop_oneof![0u8..9, 10u8..0x20, 0x7fu8..=255], 0..64),
            b in proptest::collection::vec(prop_oneof![0u8..9, 10u8..0x20, 0x7fu8..=255], 0..64),
            (ma, mi, pa) in (0u32..100, 0u32..100, proptest::option::of(0u32..100)),
        ) {
            let v = VersionInfo::new(ma, mi, pa);
            let mut bytes = a.clone();
            bytes.extend_from_slice(format!("BusyBox v{}", v.raw).as_bytes());
            bytes.extend_from_slice(&b);
            let (_, found) = extract_version(&bytes).unwrap();
            prop_assert_eq!(found, v);
        }
    }
}
