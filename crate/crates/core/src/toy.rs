//! Bundled toy target with planted, deterministic bugs.
//!
//! Variant A crashes on `BOOM` (null write), `NEST` followed by a few
//! thousand `(` (stack exhaustion) and `ABRT` (abort). Variant B keeps only
//! the `BOOM` bug. Both hang on `LOOP`.

use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const SOURCE: &str = include_str!("../toy/toy_applet.c");

/// Parentheses needed after `NEST` to exhaust an 8 MiB stack.
pub const NEST_OVERFLOW_DEPTH: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyVariant {
    A,
    B,
}

impl ToyVariant {
    pub fn file_name(self) -> &'static str {
        match self {
            ToyVariant::A => "toy_a",
            ToyVariant::B => "toy_b",
        }
    }
}

/// Compiles the toy with the system C compiler (`$CC`, default `cc`) into
/// `out_dir`, with debug info so backtraces carry symbol names.
pub fn build_toy(variant: ToyVariant, out_dir: &Path) -> io::Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let src = out_dir.join("toy_applet.c");
    std::fs::write(&src, SOURCE)?;
    let out = out_dir.join(variant.file_name());
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let mut cmd = Command::new(&cc);
    cmd.args(["-g", "-O0", "-fno-omit-frame-pointer", "-o"]).arg(&out).arg(&src);
    if variant == ToyVariant::B {
        cmd.arg("-DTOY_VARIANT_B");
    }
    let result = cmd.output()?;
    if !result.status.success() {
        return Err(io::Error::other(format!(
            "{cc} failed: {}",
            String::from_utf8_lossy(&result.stderr)
        )));
    }
    Ok(out)
}

/// Sample inputs, one per planted bug.
pub fn boom_input() -> Vec<u8> {
    b"print BOOM now\n".to_vec()
}

pub fn abrt_input() -> Vec<u8> {
    b"x ABRT y\n".to_vec()
}

pub fn nest_input() -> Vec<u8> {
    let mut v = b"NEST".to_vec();
    v.extend(std::iter::repeat_n(b'(', NEST_OVERFLOW_DEPTH));
    v
}
