//! ROUGE-L, label-level analyses and their CSV / text-table output.

mod labels;
mod rouge;
pub mod stats;

pub use labels::{
    corpus_factscore, delta_by_label, entropy_by_label, factscore_mean, token_deltas,
    token_entropies, Averaging, Category, DeltaReport, DeltaRow, EntropyReport, EntropyRow,
};
pub use rouge::{lcs_len, rouge_l, rouge_l_tokens, RougeLScore};

use std::fmt::Write as _;

use stats::{KahanSum, MeanStat};

use crate::error::Result;

/// Mean of per-document ROUGE-L precision, recall and F1.
pub fn mean_rouge<I>(scores: I) -> Option<RougeLScore>
where
    I: IntoIterator<Item = RougeLScore>,
{
    let (mut p, mut r, mut f) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    let mut n = 0usize;
    for s in scores {
        p.add(s.precision);
        r.add(s.recall);
        f.add(s.f1);
        n += 1;
    }
    (n > 0).then(|| RougeLScore {
        precision: p.total() / n as f64,
        recall: r.total() / n as f64,
        f1: f.total() / n as f64,
    })
}

fn write_csv_rows<W: std::io::Write>(out: W, rows: &[(Category, &str, MeanStat)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["category", "metric", "mean", "stderr", "count"])?;
    for (cat, metric, s) in rows {
        w.write_record([
            cat.name(),
            metric,
            &s.mean.to_string(),
            &s.stderr.to_string(),
            &s.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl DeltaReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .flat_map(|r| {
                [
                    (r.category, "delta_score", r.delta_score),
                    (r.category, "delta_rank", r.delta_rank),
                ]
            })
            .collect();
        write_csv_rows(out, &rows)
    }

    /// Text table with one row per label category.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "CPMI vs log-prob (lambda = {}, tau = {})", self.lambda, self.tau);
        let _ = writeln!(
            s,
            "{:<18} {:>22} {:>22} {:>8}",
            "", "delta score", "delta rank", "tokens"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>22} {:>22} {:>8}",
                r.category.title(),
                format!("{:.4} ± {:.4}", r.delta_score.mean, r.delta_score.stderr),
                format!("{:.2} ± {:.2}", r.delta_rank.mean, r.delta_rank.stderr),
                r.delta_score.count
            );
        }
        s
    }
}

impl EntropyReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| (r.category, "entropy", r.entropy))
            .collect();
        write_csv_rows(out, &rows)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>22} {:>8}", "", "conditional entropy", "tokens");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>22} {:>8}",
                r.category.title(),
                format!("{:.4} ± {:.4}", r.entropy.mean, r.entropy.stderr),
                r.entropy.count
            );
        }
        s
    }
}
