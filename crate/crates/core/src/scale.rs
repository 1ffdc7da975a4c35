//! Shared data model: run records, the non-vocabulary-parameter to
//! embedding-width table, and the training FLOPs cost model
//! `C = 6 (N_nv + V d) H f(V)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::fertility::FertilityFit;

/// Vocabulary sizes are kept divisible by this for tensor-core friendly shapes.
pub const VOCAB_MULTIPLE: f64 = 128.0;

/// Rounds a vocabulary size to the nearest multiple of 128 (never below 128).
pub fn round_vocab(v: f64) -> u64 {
    let k = (v / VOCAB_MULTIPLE).round().max(1.0);
    (k * VOCAB_MULTIPLE) as u64
}

/// A compute budget in floating-point operations.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FlopsBudget(f64);

impl FlopsBudget {
    pub fn new(value: f64) -> Result<Self> {
        ensure_positive("FLOPs budget", value)?;
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for FlopsBudget {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FlopsBudget> for f64 {
    fn from(b: FlopsBudget) -> f64 {
        b.0
    }
}

/// One bracket of the shape table: every `n_nv <= max_n_nv` not claimed by an
/// earlier bracket uses `embed_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeBracket {
    pub max_n_nv: f64,
    pub embed_dim: u32,
}

/// Ordered lookup from non-vocabulary parameter count to embedding width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapeTableFile", into = "ShapeTableFile")]
pub struct ShapeTable {
    brackets: Vec<ShapeBracket>,
}

#[derive(Serialize, Deserialize)]
struct ShapeTableFile {
    bracket: Vec<ShapeBracket>,
}

impl TryFrom<ShapeTableFile> for ShapeTable {
    type Error = Error;
    fn try_from(f: ShapeTableFile) -> Result<Self> {
        ShapeTable::new(f.bracket)
    }
}

impl From<ShapeTable> for ShapeTableFile {
    fn from(t: ShapeTable) -> Self {
        ShapeTableFile { bracket: t.brackets }
    }
}

/// Upper end of the parameter range every shape table must cover.
pub const SHAPE_COVERAGE: f64 = 1e12;

impl ShapeTable {
    pub fn new(brackets: Vec<ShapeBracket>) -> Result<Self> {
        if brackets.is_empty() {
            return Err(Error::invalid("shape table has no brackets"));
        }
        for w in brackets.windows(2) {
            if !(w[1].max_n_nv > w[0].max_n_nv && w[1].embed_dim > w[0].embed_dim) {
                return Err(Error::invalid(format!(
                    "shape table brackets must be strictly increasing in both columns ({:e}/{} then {:e}/{})",
                    w[0].max_n_nv, w[0].embed_dim, w[1].max_n_nv, w[1].embed_dim
                )));
            }
        }
        if brackets[0].max_n_nv <= 0.0 || brackets[0].embed_dim == 0 {
            return Err(Error::invalid("shape table entries must be positive"));
        }
        let last = brackets.last().unwrap().max_n_nv;
        if last < SHAPE_COVERAGE {
            return Err(Error::invalid(format!(
                "shape table must cover up to {SHAPE_COVERAGE:e} parameters, covers {last:e}"
            )));
        }
        Ok(Self { brackets })
    }

    pub fn brackets(&self) -> &[ShapeBracket] {
        &self.brackets
    }

    pub fn max_covered(&self) -> f64 {
        self.brackets.last().map(|b| b.max_n_nv).unwrap_or(0.0)
    }

    /// Embedding width for a model with `n_nv` non-vocabulary parameters.
    pub fn embed_dim_for(&self, n_nv: f64) -> Result<u32> {
        ensure_positive("n_nv", n_nv)?;
        self.brackets
            .iter()
            .find(|b| n_nv <= b.max_n_nv)
            .map(|b| b.embed_dim)
            .ok_or(Error::OutOfRange {
                value: n_nv,
                max: self.max_covered(),
            })
    }

    /// Loads a table from TOML (`[[bracket]]` entries) or JSON, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }
}

impl Default for ShapeTable {
    fn default() -> Self {
        const ROWS: [(f64, u32); 13] = [
            (50e6, 512),
            (200e6, 768),
            (500e6, 1024),
            (1e9, 1536),
            (2e9, 2048),
            (5e9, 3200),
            (10e9, 4096),
            (20e9, 5120),
            (50e9, 6048),
            (100e9, 8192),
            (200e9, 12288),
            (500e9, 16384),
            (1000e9, 20480),
        ];
        Self {
            brackets: ROWS
                .iter()
                .map(|&(max_n_nv, embed_dim)| ShapeBracket { max_n_nv, embed_dim })
                .collect(),
        }
    }
}

/// Training tokens `D = H f(V)` for `h` characters at vocabulary size `v`.
pub fn tokens_from_chars(h: f64, v: f64, fert: &FertilityFit) -> Result<f64> {
    ensure_positive("character count", h)?;
    if !(v >= 2.0) {
        return Err(Error::invalid(format!("vocabulary size must be at least 2, got {v}")));
    }
    Ok(h * fert.eval(v))
}

/// Training FLOPs `6 (N_nv + V d) H f(V)`. Vocabulary parameters count the
/// output layer only (`V d`, not `2 V d`).
pub fn flops_cost(n_nv: f64, v: f64, d: f64, h: f64, fert: &FertilityFit) -> Result<f64> {
    ensure_positive("n_nv", n_nv)?;
    ensure_positive("embedding width", d)?;
    let tokens = tokens_from_chars(h, v, fert)?;
    Ok(6.0 * (n_nv + v * d) * tokens)
}

/// One checkpoint of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub n_nv: f64,
    /// May be fractional for interpolated (synthetic) records.
    pub vocab_size: f64,
    pub embed_dim: u32,
    pub chars_seen: f64,
    pub tokens_seen: f64,
    pub flops: f64,
    pub lm_loss: f64,
    pub loss_u: f64,
    /// Set on records produced by interpolation rather than observed.
    #[serde(skip)]
    pub synthetic: bool,
}

impl RunRecord {
    pub fn n_v(&self) -> f64 {
        self.vocab_size * self.embed_dim as f64
    }

    /// Checks the record invariants. The FLOPs consistency check runs only
    /// when a fertility fit is supplied.
    pub fn validate(&self, fert: Option<&FertilityFit>) -> Result<()> {
        let fail = |reason: String| Error::InvalidRecord {
            run_id: self.run_id.clone(),
            reason,
        };
        for (name, v) in [
            ("n_nv", self.n_nv),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim as f64),
            ("chars_seen", self.chars_seen),
            ("tokens_seen", self.tokens_seen),
            ("flops", self.flops),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(fail(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.lm_loss.is_finite() || !self.loss_u.is_finite() {
            return Err(fail("losses must be finite".into()));
        }
        if self.tokens_seen > self.chars_seen {
            return Err(fail(format!(
                "tokens_seen {:e} exceeds chars_seen {:e}",
                self.tokens_seen, self.chars_seen
            )));
        }
        if self.loss_u > self.lm_loss {
            return Err(fail(format!(
                "loss_u {} exceeds lm_loss {}",
                self.loss_u, self.lm_loss
            )));
        }
        if let Some(fert) = fert {
            let expected = self.expected_flops(fert)?;
            let rel = (self.flops - expected).abs() / expected;
            if rel > 0.01 {
                return Err(fail(format!(
                    "flops {:e} differs from cost model {:e} by {:.2}%",
                    self.flops,
                    expected,
                    100.0 * rel
                )));
            }
        }
        Ok(())
    }

    pub fn expected_flops(&self, fert: &FertilityFit) -> Result<f64> {
        flops_cost(
            self.n_nv,
            self.vocab_size,
            self.embed_dim as f64,
            self.chars_seen,
            fert,
        )
    }
}

pub const RECORD_HEADER: [&str; 9] = [
    "run_id",
    "n_nv",
    "vocab_size",
    "embed_dim",
    "chars_seen",
    "tokens_seen",
    "flops",
    "lm_loss",
    "loss_u",
];

#[derive(Deserialize)]
struct RawRecord {
    run_id: String,
    n_nv: f64,
    vocab_size: f64,
    embed_dim: f64,
    chars_seen: f64,
    tokens_seen: f64,
    flops: Option<f64>,
    lm_loss: f64,
    loss_u: f64,
}

/// Reads run records from CSV. Empty `flops` cells are filled from the cost
/// model, which requires `fert`.
pub fn read_records<R: Read>(reader: R, fert: Option<&FertilityFit>) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RECORD_HEADER {
        return Err(Error::invalid(format!(
            "run-record header must be `{}`",
            RECORD_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let raw: RawRecord = row?;
        if raw.embed_dim.fract() != 0.0 || !(raw.embed_dim >= 1.0) || raw.embed_dim > u32::MAX as f64 {
            return Err(Error::InvalidRecord {
                run_id: raw.run_id,
                reason: format!("embed_dim must be a positive integer, got {}", raw.embed_dim),
            });
        }
        let mut rec = RunRecord {
            run_id: raw.run_id,
            n_nv: raw.n_nv,
            vocab_size: raw.vocab_size,
            embed_dim: raw.embed_dim as u32,
            chars_seen: raw.chars_seen,
            tokens_seen: raw.tokens_seen,
            flops: raw.flops.unwrap_or(f64::NAN),
            lm_loss: raw.lm_loss,
            loss_u: raw.loss_u,
            synthetic: false,
        };
        if raw.flops.is_none() {
            let fert = fert.ok_or_else(|| Error::InvalidRecord {
                run_id: rec.run_id.clone(),
                reason: "empty flops cell and no fertility fit to recompute it".into(),
            })?;
            rec.flops = rec.expected_flops(fert)?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records_file(path: &Path, fert: Option<&FertilityFit>) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file), fert)
}

pub fn write_records<W: Write>(writer: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            fmt_num(r.n_nv),
            fmt_num(r.vocab_size),
            r.embed_dim.to_string(),
            fmt_num(r.chars_seen),
            fmt_num(r.tokens_seen),
            fmt_num(r.flops),
            fmt_num(r.lm_loss),
            fmt_num(r.loss_u),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Shortest round-tripping representation; scientific for large magnitudes.
pub(crate) fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e7 || v.abs() < 1e-4) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset_fit() -> FertilityFit {
        FertilityFit::paper_2024()
    }

    #[test]
    fn embed_dim_lookup_rows() {
        let t = ShapeTable::default();
        assert_eq!(t.embed_dim_for(33e6).unwrap(), 512);
        assert_eq!(t.embed_dim_for(50e6).unwrap(), 512);
        assert_eq!(t.embed_dim_for(50e6 + 1.0).unwrap(), 768);
        assert_eq!(t.embed_dim_for(2.87e9).unwrap(), 3200);
        assert_eq!(t.embed_dim_for(70e9).unwrap(), 8192);
        assert_eq!(t.embed_dim_for(1e12).unwrap(), 20480);
    }

    #[test]
    fn embed_dim_out_of_range_names_max() {
        let err = ShapeTable::default().embed_dim_for(2e12).unwrap_err();
        match err {
            Error::OutOfRange { max, .. } => assert_eq!(max, 1e12),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ShapeTable::default().embed_dim_for(0.0).is_err());
    }

    #[test]
    fn shape_table_rejects_non_monotone_and_short_coverage() {
        let b = |m: f64, d: u32| ShapeBracket {
            max_n_nv: m,
            embed_dim: d,
        };
        assert!(ShapeTable::new(vec![b(1e9, 512), b(1e12, 512)]).is_err());
        assert!(ShapeTable::new(vec![b(1e9, 512), b(5e8, 768)]).is_err());
        assert!(ShapeTable::new(vec![b(1e9, 512), b(1e11, 768)]).is_err());
        assert!(ShapeTable::new(vec![b(1e9, 512), b(1e12, 768)]).is_ok());
    }

    #[test]
    fn shape_table_toml_roundtrip() {
        let t = ShapeTable::default();
        let text = toml::to_string(&t).unwrap();
        assert!(text.contains("[[bracket]]"));
        let back: ShapeTable = toml::from_str(&text).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn flops_cost_reference_point() {
        // 6 * (3e9 + 37000*3200) * 1e11 * f(37000), f evaluated independently.
        let ln = 37000f64.ln();
        let f = 0.0064 * ln * ln - 0.1581 * ln + 1.2047;
        let expected = 6.0 * (3e9 + 37000.0 * 3200.0) * 1e11 * f;
        let got = flops_cost(3e9, 37000.0, 3200.0, 1e11, &preset_fit()).unwrap();
        assert!((got / expected - 1.0).abs() < 1e-12);
        assert!((got / 4.674e20 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn flops_cost_linear_in_chars_and_rejects_zero() {
        let fert = preset_fit();
        let a = flops_cost(1e8, 8192.0, 768.0, 1e9, &fert).unwrap();
        let b = flops_cost(1e8, 8192.0, 768.0, 2e9, &fert).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(flops_cost(1e8, 8192.0, 768.0, 0.0, &fert).is_err());
        let tiny = flops_cost(1e8, 8192.0, 768.0, 1e-30, &fert).unwrap();
        assert!(tiny < 1e-10);
    }

    #[test]
    fn tokens_from_chars_reference() {
        let fert = preset_fit();
        let d = tokens_from_chars(1e9, 32768.0, &fert).unwrap();
        // 1e9 * f(32768) with f from the quadratic: 0.2527538...
        assert!((d - 2.527538e8).abs() / 2.527538e8 < 1e-6, "{d}");
        let small = tokens_from_chars(2300e6, 2000.0, &fert).unwrap();
        let large = tokens_from_chars(2300e6, 256000.0, &fert).unwrap();
        assert!(small > large);
        assert!(tokens_from_chars(1e9, 1.0, &fert).is_err());
    }

    #[test]
    fn budget_rejects_non_positive() {
        assert!(FlopsBudget::new(0.0).is_err());
        assert!(FlopsBudget::new(-1.0).is_err());
        assert!(FlopsBudget::new(f64::NAN).is_err());
        assert_eq!(FlopsBudget::new(1e21).unwrap().value(), 1e21);
    }

    #[test]
    fn round_vocab_to_128() {
        assert_eq!(round_vocab(37000.0), 36992);
        assert_eq!(round_vocab(37100.0), 37120);
        assert_eq!(round_vocab(10.0), 128);
    }

    fn record(flops: f64) -> RunRecord {
        let fert = preset_fit();
        let tokens = tokens_from_chars(1e9, 16384.0, &fert).unwrap();
        RunRecord {
            run_id: "r1".into(),
            n_nv: 85e6,
            vocab_size: 16384.0,
            embed_dim: 768,
            chars_seen: 1e9,
            tokens_seen: tokens,
            flops,
            lm_loss: 3.1,
            loss_u: -4.0,
            synthetic: false,
        }
    }

    #[test]
    fn record_validation() {
        let fert = preset_fit();
        let good = flops_cost(85e6, 16384.0, 768.0, 1e9, &fert).unwrap();
        record(good).validate(Some(&fert)).unwrap();
        assert!(record(good * 1.02).validate(Some(&fert)).is_err());
        assert!(record(good * 1.02).validate(None).is_ok());
        let mut r = record(good);
        r.loss_u = 5.0;
        assert!(r.validate(None).is_err());
        let mut r = record(good);
        r.tokens_seen = 2e9;
        assert!(r.validate(None).is_err());
    }

    #[test]
    fn csv_recomputes_empty_flops() {
        let fert = preset_fit();
        let csv = "run_id,n_nv,vocab_size,embed_dim,chars_seen,tokens_seen,flops,lm_loss,loss_u\n\
                   a,85e6,16384,768,1e9,2.9e8,,3.1,-4.0\n\
                   b,85e6,16384,768,2e9,5.8e8,1.5e18,3.0,-4.1\n";
        let recs = read_records(csv.as_bytes(), Some(&fert)).unwrap();
        assert_eq!(recs.len(), 2);
        let expected = flops_cost(85e6, 16384.0, 768.0, 1e9, &fert).unwrap();
        assert_eq!(recs[0].flops, expected);
        assert_eq!(recs[1].flops, 1.5e18);
        assert!(read_records(csv.as_bytes(), None).is_err());

        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice(), None).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn csv_rejects_wrong_header() {
        let csv = "id,n\n1,2\n";
        assert!(read_records(csv.as_bytes(), None).is_err());
    }
}
