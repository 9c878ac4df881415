//! Versioned checkpoint files shared by policies, reward tables and
//! Bradley-Terry models.
//!
//! Two encodings of the same content:
//!
//! - binary: magic `RFLB`, u32 version, u8 kind, u8 flags, u8 dim count,
//!   little-endian u32 dims, optional little-endian f64 bound, u64 value
//!   count, then row-major values as little-endian f64;
//! - text: a `raftlab-checkpoint v1` header followed by `kind`, `dims`,
//!   optional `bound` and `values` lines. Floats are printed with Rust's
//!   shortest round-trip formatting, so load(save(x)) is bit-exact in both
//!   modes.
//!
//! The loader sniffs the magic bytes, so either encoding can be read from
//! any path.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{BanditPolicy, Policy, SeqPolicy};

const MAGIC: &[u8; 4] = b"RFLB";
const TEXT_HEADER: &str = "raftlab-checkpoint v1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Bandit policy logits; dims `[m, n]`.
    BanditPolicy,
    /// Sequence policy conditional logits; dims `[m, v, l]`.
    SeqPolicy,
    /// Ground-truth reward table with bound; dims `[m, n]`.
    RewardTable,
    /// Full-capacity Bradley-Terry table; dims `[m, n]`.
    BtFull,
    /// Factorized Bradley-Terry model (u then v); dims `[m, n]`.
    BtFactorized,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::BanditPolicy => 0,
            CheckpointKind::SeqPolicy => 1,
            CheckpointKind::RewardTable => 2,
            CheckpointKind::BtFull => 3,
            CheckpointKind::BtFactorized => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CheckpointKind::BanditPolicy),
            1 => Some(CheckpointKind::SeqPolicy),
            2 => Some(CheckpointKind::RewardTable),
            3 => Some(CheckpointKind::BtFull),
            4 => Some(CheckpointKind::BtFactorized),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            CheckpointKind::BanditPolicy => "bandit-policy",
            CheckpointKind::SeqPolicy => "seq-policy",
            CheckpointKind::RewardTable => "reward-table",
            CheckpointKind::BtFull => "bt-full",
            CheckpointKind::BtFactorized => "bt-factorized",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "bandit-policy" => Some(CheckpointKind::BanditPolicy),
            "seq-policy" => Some(CheckpointKind::SeqPolicy),
            "reward-table" => Some(CheckpointKind::RewardTable),
            "bt-full" => Some(CheckpointKind::BtFull),
            "bt-factorized" => Some(CheckpointKind::BtFactorized),
            _ => None,
        }
    }

    fn expected_len(self, dims: &[u32]) -> Option<usize> {
        let d: Vec<usize> = dims.iter().map(|&x| x as usize).collect();
        match (self, d.as_slice()) {
            (CheckpointKind::BanditPolicy, [m, n]) => Some(m * n),
            (CheckpointKind::SeqPolicy, [m, v, l]) => Some(m * l * v * v),
            (CheckpointKind::RewardTable, [m, n]) => Some(m * n),
            (CheckpointKind::BtFull, [m, n]) => Some(m * n),
            (CheckpointKind::BtFactorized, [m, n]) => Some(m + n),
            _ => None,
        }
    }
}

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub dims: Vec<u32>,
    pub bound: Option<f64>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        dims: Vec<u32>,
        bound: Option<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = kind
            .expected_len(&dims)
            .ok_or_else(|| Error::config(format!("bad dims {dims:?} for {}", kind.name())))?;
        if values.len() != expected {
            return Err(Error::config(format!(
                "{} checkpoint has {} values, expected {expected}",
                kind.name(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::config("checkpoint values must be finite"));
        }
        Ok(Self { kind, dims, bound, values })
    }

    pub fn from_policy(policy: &Policy) -> Self {
        match policy {
            Policy::Bandit(p) => Checkpoint {
                kind: CheckpointKind::BanditPolicy,
                dims: vec![p.num_prompts() as u32, p.num_responses() as u32],
                bound: None,
                values: p.logits().to_vec(),
            },
            Policy::Seq(p) => Checkpoint {
                kind: CheckpointKind::SeqPolicy,
                dims: vec![p.num_prompts() as u32, p.vocab() as u32, p.seq_len() as u32],
                bound: None,
                values: p.logits().to_vec(),
            },
        }
    }

    pub fn into_policy(self) -> Result<Policy> {
        match self.kind {
            CheckpointKind::BanditPolicy => {
                let (m, n) = (self.dims[0] as usize, self.dims[1] as usize);
                Ok(Policy::Bandit(BanditPolicy::from_logits(m, n, self.values)?))
            }
            CheckpointKind::SeqPolicy => {
                let (m, v, l) =
                    (self.dims[0] as usize, self.dims[1] as usize, self.dims[2] as usize);
                Ok(Policy::Seq(SeqPolicy::from_logits(m, v, l, self.values)?))
            }
            other => Err(Error::config(format!(
                "checkpoint holds a {}, not a policy",
                other.name()
            ))),
        }
    }

    pub fn save(&self, path: &Path, binary: bool) -> Result<()> {
        if binary {
            fs::write(path, self.to_binary())?;
        } else {
            fs::write(path, self.to_text())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let display = path.display().to_string();
        if bytes.starts_with(MAGIC) {
            Self::from_binary(&bytes, &display)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::format(&display, "neither binary magic nor utf-8 text"))?;
            Self::from_text(&text, &display)
        }
    }

    fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(u8::from(self.bound.is_some()));
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        if let Some(b) = self.bound {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_binary(bytes: &[u8], path: &str) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: MAGIC.len(), path };
        let version = u32::from_le_bytes(cur.take::<4>()?);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let kind = CheckpointKind::from_code(cur.take::<1>()?[0])
            .ok_or_else(|| Error::format(path, "unknown checkpoint kind"))?;
        let has_bound = cur.take::<1>()?[0] != 0;
        let ndims = cur.take::<1>()?[0] as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(u32::from_le_bytes(cur.take::<4>()?));
        }
        let bound = if has_bound { Some(f64::from_le_bytes(cur.take::<8>()?)) } else { None };
        let count = u64::from_le_bytes(cur.take::<8>()?) as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(cur.take::<8>()?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }
        Checkpoint::new(kind, dims, bound, values)
    }

    fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "{TEXT_HEADER}");
        let _ = writeln!(out, "kind {}", self.kind.name());
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "dims {}", dims.join(" "));
        if let Some(b) = self.bound {
            let _ = writeln!(out, "bound {b}");
        }
        let _ = writeln!(out, "values {}", self.values.len());
        for chunk in self.values.chunks(8) {
            let row: Vec<String> = chunk.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    fn from_text(text: &str, path: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TEXT_HEADER) {
            return Err(Error::format(path, "missing checkpoint header"));
        }
        let mut kind = None;
        let mut dims: Vec<u32> = Vec::new();
        let mut bound = None;
        let mut declared = None;
        let mut values: Vec<f64> = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let first = toks.next().unwrap();
            match first {
                "kind" => {
                    let name = toks.next().unwrap_or("");
                    kind = Some(
                        CheckpointKind::from_name(name)
                            .ok_or_else(|| Error::format(path, format!("unknown kind {name}")))?,
                    );
                }
                "dims" => {
                    for t in toks {
                        dims.push(
                            t.parse().map_err(|_| Error::format(path, format!("bad dim {t}")))?,
                        );
                    }
                }
                "bound" => {
                    let t = toks.next().unwrap_or("");
                    bound = Some(
                        t.parse().map_err(|_| Error::format(path, format!("bad bound {t}")))?,
                    );
                }
                "values" => {
                    let t = toks.next().unwrap_or("");
                    declared = Some(
                        t.parse::<usize>()
                            .map_err(|_| Error::format(path, format!("bad value count {t}")))?,
                    );
                }
                _ => {
                    values.push(first.parse().map_err(|_| {
                        Error::format(path, format!("bad value {first}"))
                    })?);
                    for t in toks {
                        values.push(
                            t.parse()
                                .map_err(|_| Error::format(path, format!("bad value {t}")))?,
                        );
                    }
                }
            }
        }
        let kind = kind.ok_or_else(|| Error::format(path, "missing kind line"))?;
        if let Some(d) = declared {
            if d != values.len() {
                return Err(Error::format(
                    path,
                    format!("declared {d} values but found {}", values.len()),
                ));
            }
        }
        Checkpoint::new(kind, dims, bound, values)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.pos + N > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn awkward_values(n: usize, seed: u64) -> Vec<f64> {
        // Mix magnitudes and signs to exercise the round-trip formatting.
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|i| match i % 4 {
                0 => rng.random::<f64>() * 1e-13,
                1 => -rng.random::<f64>() * 1e9,
                2 => rng.random::<f64>() - 0.5,
                _ => (rng.random::<f64>() - 0.5) * 1e-300,
            })
            .collect()
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new(
            CheckpointKind::SeqPolicy,
            vec![2, 3, 4],
            None,
            awkward_values(2 * 4 * 3 * 3, 1),
        )
        .unwrap();
        let path = dir.path().join("p.ckpt");
        ck.save(&path, true).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        for (a, b) in ck.values.iter().zip(&back.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new(
            CheckpointKind::RewardTable,
            vec![3, 5],
            Some(1.0),
            awkward_values(15, 2).iter().map(|v| v.abs().min(1.0)).collect(),
        )
        .unwrap();
        let path = dir.path().join("r.ckpt");
        ck.save(&path, false).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for (a, b) in ck.values.iter().zip(&back.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.bound, Some(1.0));
    }

    #[test]
    fn loader_sniffs_the_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new(CheckpointKind::BanditPolicy, vec![1, 4], None, vec![0.0; 4])
            .unwrap();
        let bin = dir.path().join("b.ckpt");
        let txt = dir.path().join("t.ckpt");
        ck.save(&bin, true).unwrap();
        ck.save(&txt, false).unwrap();
        assert_eq!(Checkpoint::load(&bin).unwrap(), Checkpoint::load(&txt).unwrap());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, "not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let short = dir.path().join("short.ckpt");
        std::fs::write(&short, b"RFLB\x01\x00").unwrap();
        assert!(Checkpoint::load(&short).is_err());

        let counted = dir.path().join("count.ckpt");
        std::fs::write(
            &counted,
            format!("{TEXT_HEADER}\nkind bandit-policy\ndims 1 4\nvalues 4\n0 0 0\n"),
        )
        .unwrap();
        assert!(Checkpoint::load(&counted).is_err());
    }

    #[test]
    fn value_count_must_match_dims() {
        assert!(
            Checkpoint::new(CheckpointKind::BanditPolicy, vec![2, 4], None, vec![0.0; 7]).is_err()
        );
        assert!(
            Checkpoint::new(CheckpointKind::BtFactorized, vec![2, 4], None, vec![0.0; 6]).is_ok()
        );
    }
}
