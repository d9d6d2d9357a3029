//! Separation quality metrics, evaluation reports, and run comparisons.

mod bss;
mod report;
mod stats;

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use bss::{
    bss_decompose, framewise_median, framewise_scores, median, ratio_db, Decomposition,
    FramewiseScores, Scores, WindowConfig, PERFECT_RATIO,
};
pub use report::{
    compare_runs, evaluate_directories, evaluate_track, render_comparison, Comparison, ComparisonRow, EvalReport,
    RunMetadata, RunSummary, SongScores,
};
pub use stats::{incomplete_beta, ln_gamma, student_t_cdf, student_t_quantile, welch_t_test, TTestSummary};

/// A decibel value that may be infinite or undefined (NaN).
///
/// Serialized as a JSON number when finite, `"inf"`/`"-inf"` when infinite,
/// and `null` when undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Db {
    pub fn is_defined(self) -> bool {
        !self.0.is_nan()
    }

    /// Text form shared by CSV output and reports.
    pub fn to_text(self) -> String {
        match self.0 {
            v if v.is_nan() => String::new(),
            f64::INFINITY => "inf".into(),
            f64::NEG_INFINITY => "-inf".into(),
            v => v.to_string(),
        }
    }
}

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            v if v.is_nan() => s.serialize_none(),
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }
}

struct DbVisitor;

impl Visitor<'_> for DbVisitor {
    type Value = Db;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number, \"inf\", \"-inf\" or null")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Db, E> {
        Ok(Db(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Db, E> {
        Ok(Db(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Db, E> {
        Ok(Db(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Db, E> {
        match v {
            "inf" => Ok(Db(f64::INFINITY)),
            "-inf" => Ok(Db(f64::NEG_INFINITY)),
            other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
        }
    }

    fn visit_unit<E: de::Error>(self) -> std::result::Result<Db, E> {
        Ok(Db(f64::NAN))
    }

    fn visit_none<E: de::Error>(self) -> std::result::Result<Db, E> {
        Ok(Db(f64::NAN))
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Db, D::Error> {
        d.deserialize_any(DbVisitor)
    }
}
