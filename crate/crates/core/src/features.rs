//! Labeled feature vectors and the line-oriented feature file format.
//!
//! ```text
//! lsne-features 1 dims=<N>
//! <label>,<f1>,...,<fN>
//! ```
//!
//! Lines starting with `#` are comments. Values are written in shortest
//! round-trip form, so a saved set re-loads bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &str = "lsne-features";
pub const FEATURE_VERSION: u32 = 1;

/// Per-label vector pools, in first-appearance order.
pub type LabelPools<F> = IndexMap<String, Vec<Vec<F>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Record<F> {
    pub label: String,
    pub values: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<F> {
    dims: usize,
    records: Vec<Record<F>>,
}

pub(crate) fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains([',', '\n', '\r']) || label.trim() != label {
        return Err(Error::InvalidLabel(label.to_string()));
    }
    Ok(())
}

pub(crate) fn check_finite<F: Scalar>(values: &[F]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite feature value".into()))
    }
}

impl<F: Scalar> FeatureSet<F> {
    pub fn new(dims: usize) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Config("feature dimensionality must be positive".into()));
        }
        Ok(Self {
            dims,
            records: Vec::new(),
        })
    }

    pub fn from_records(dims: usize, records: Vec<Record<F>>) -> Result<Self> {
        let mut set = Self::new(dims)?;
        for r in records {
            set.push(r.label, r.values)?;
        }
        Ok(set)
    }

    pub fn from_pools(dims: usize, pools: &LabelPools<F>) -> Result<Self> {
        let mut set = Self::new(dims)?;
        for (label, vectors) in pools {
            for v in vectors {
                set.push(label.clone(), v.clone())?;
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<F>) -> Result<()> {
        let label = label.into();
        validate_label(&label)?;
        if values.len() != self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                found: values.len(),
            });
        }
        check_finite(&values)?;
        self.records.push(Record { label, values });
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record<F>] {
        &self.records
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<String> {
        let mut seen = IndexMap::new();
        for r in &self.records {
            seen.entry(r.label.clone()).or_insert(());
        }
        seen.into_keys().collect()
    }

    pub fn pools(&self) -> LabelPools<F> {
        let mut pools = LabelPools::new();
        for r in &self.records {
            pools
                .entry(r.label.clone())
                .or_insert_with(Vec::new)
                .push(r.values.clone());
        }
        pools
    }

    /// Partition into (records whose label is in `labels`, everything else),
    /// preserving record order on both sides.
    pub fn split_by_label<S: AsRef<str>>(&self, labels: &[S]) -> Result<(Self, Self)> {
        let present = self.labels();
        for l in labels {
            if !present.iter().any(|p| p == l.as_ref()) {
                return Err(Error::UnknownLabel(l.as_ref().to_string()));
            }
        }
        let (picked, rest): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .partition(|r| labels.iter().any(|l| l.as_ref() == r.label));
        Ok((
            Self {
                dims: self.dims,
                records: picked,
            },
            Self {
                dims: self.dims,
                records: rest,
            },
        ))
    }

    pub fn to_text(&self) -> Result<String> {
        self.to_text_with_comments(&[])
    }

    pub(crate) fn to_text_with_comments(&self, comments: &[String]) -> Result<String> {
        if self.records.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut out = String::new();
        writeln!(out, "{FEATURE_MAGIC} {FEATURE_VERSION} dims={}", self.dims).unwrap();
        for c in comments {
            writeln!(out, "# {c}").unwrap();
        }
        for r in &self.records {
            out.push_str(&r.label);
            for v in &r.values {
                write!(out, ",{:?}", v.as_f64()).unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_comments(text).map(|(set, _)| set)
    }

    /// Parse, also returning the comment lines (without the leading `#`).
    pub(crate) fn parse_with_comments(text: &str) -> Result<(Self, Vec<String>)> {
        let mut comments = Vec::new();
        let mut set: Option<Self> = None;
        let mut header_line = 0;
        for (idx, raw) in text.split('\n').enumerate() {
            let line_no = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim().to_string());
                continue;
            }
            let Some(set) = set.as_mut() else {
                set = Some(parse_header(line, line_no)?);
                header_line = line_no;
                continue;
            };
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or_default();
            validate_label(label).map_err(|e| Error::parse(line_no, e.to_string()))?;
            let mut values = Vec::with_capacity(set.dims);
            for tok in fields {
                let x: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("invalid number `{tok}`")))?;
                let x = F::from_f64(x).filter(|v| v.is_finite() && x.is_finite());
                let Some(x) = x else {
                    return Err(Error::parse(line_no, "non-finite value"));
                };
                values.push(x);
            }
            if values.len() != set.dims {
                return Err(Error::parse(
                    line_no,
                    format!(
                        "dimension mismatch: expected {} values, found {}",
                        set.dims,
                        values.len()
                    ),
                ));
            }
            set.records.push(Record {
                label: label.to_string(),
                values,
            });
        }
        match set {
            None => Err(Error::EmptyFile),
            Some(s) if s.records.is_empty() => {
                Err(Error::parse(header_line, "header present but no records"))
            }
            Some(s) => Ok((s, comments)),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_text()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn parse_header<F: Scalar>(line: &str, line_no: usize) -> Result<FeatureSet<F>> {
    let bad = |why: &str| Error::parse(line_no, format!("malformed header: {why}"));
    let mut parts = line.split_whitespace();
    if parts.next() != Some(FEATURE_MAGIC) {
        return Err(bad("expected `lsne-features`"));
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(FEATURE_VERSION)) => {}
        Some(Ok(v)) => return Err(bad(&format!("unsupported version {v}"))),
        _ => return Err(bad("missing version")),
    }
    let dims = parts
        .next()
        .and_then(|p| p.strip_prefix("dims="))
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| bad("expected `dims=<N>` with N > 0"))?;
    if parts.next().is_some() {
        return Err(bad("trailing tokens"));
    }
    FeatureSet::new(dims)
}

/// Convenience for `FeatureSet::load`.
pub fn load_features<F: Scalar>(path: impl AsRef<Path>) -> Result<FeatureSet<F>> {
    FeatureSet::load(path)
}

/// Convenience for `FeatureSet::save`.
pub fn save_features<F: Scalar>(set: &FeatureSet<F>, path: impl AsRef<Path>) -> Result<()> {
    set.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_records() -> FeatureSet<f64> {
        FeatureSet::parse("lsne-features 1 dims=2\na,0.0,1.0\nb,1.0,0.0\n").unwrap()
    }

    #[test]
    fn parses_minimal_file() {
        let set = two_records();
        assert_eq!(set.dims(), 2);
        assert_eq!(set.len(), 2);
        assert_eq!(set.records()[0].label, "a");
        assert_eq!(set.records()[1].values, vec![1.0, 0.0]);
    }

    #[test]
    fn reports_dimension_mismatch_with_line() {
        let err = FeatureSet::<f64>::parse("lsne-features 1 dims=2\na,0,1\nb,1,2,3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("dimension mismatch"), "{msg}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cases = [
            ("", "empty file"),
            ("# only a comment\n", "empty file"),
            ("lsne-feature 1 dims=2\n", "line 1"),
            ("lsne-features 2 dims=2\n", "unsupported version"),
            ("lsne-features 1 dims=0\n", "dims"),
            ("lsne-features 1 dims=2\n", "no records"),
            ("lsne-features 1 dims=1\na,NaN\n", "non-finite"),
            ("lsne-features 1 dims=1\na,inf\n", "non-finite"),
            ("lsne-features 1 dims=1\na,1e999\n", "non-finite"),
            ("lsne-features 1 dims=1\na,abc\n", "invalid number"),
            ("lsne-features 1 dims=1\n,1.0\n", "line 2"),
        ];
        for (text, needle) in cases {
            let err = FeatureSet::<f64>::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?} -> {err}");
        }
    }

    #[test]
    fn comments_are_skipped() {
        let set =
            FeatureSet::<f64>::parse("# hi\nlsne-features 1 dims=1\n# mid\na,2.5\n").unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn save_rejects_empty_set() {
        let set = FeatureSet::<f64>::new(3).unwrap();
        assert!(matches!(set.to_text(), Err(Error::EmptySet)));
    }

    #[test]
    fn single_record_is_two_lines() {
        let mut set = FeatureSet::<f64>::new(4).unwrap();
        set.push("x", vec![0.1, -2.0, 3e-300, 1e300]).unwrap();
        let text = set.to_text().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        assert_eq!(FeatureSet::parse(&text).unwrap(), set);
    }

    #[test]
    fn push_validates() {
        let mut set = FeatureSet::<f64>::new(2).unwrap();
        assert!(set.push("a,b", vec![0.0, 0.0]).is_err());
        assert!(set.push("a", vec![0.0]).is_err());
        assert!(set.push("a", vec![0.0, f64::NAN]).is_err());
        assert!(set.push("", vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn split_cases() {
        let mut set = FeatureSet::<f64>::new(1).unwrap();
        for (l, v) in [("a", 1.0), ("b", 2.0), ("c", 3.0), ("a", 4.0)] {
            set.push(l, vec![v]).unwrap();
        }
        let (a, rest) = set.split_by_label(&["a"]).unwrap();
        assert_eq!(a.labels(), vec!["a"]);
        assert_eq!(a.len(), 2);
        assert_eq!(rest.labels(), vec!["b", "c"]);

        let (all, none) = set.split_by_label(&["a", "b", "c"]).unwrap();
        assert_eq!(all, set);
        assert!(none.is_empty());

        let (none, all) = set.split_by_label::<&str>(&[]).unwrap();
        assert!(none.is_empty());
        assert_eq!(all, set);

        assert!(matches!(set.split_by_label(&["z"]), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn f32_values_survive_text_form() {
        let mut set = FeatureSet::<f32>::new(2).unwrap();
        set.push("a", vec![0.1f32, 1.0e-30]).unwrap();
        let back = FeatureSet::<f32>::parse(&set.to_text().unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
