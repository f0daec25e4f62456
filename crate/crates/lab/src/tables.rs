//! CSV tables. Every file starts with a `# config_digest=<hex>` comment line;
//! fields are numeric or bare identifiers, so no quoting is needed.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use noisemia_core::attack::{Membership, Method, ScoreRecord};
use noisemia_core::evaluation::Histogram;
use noisemia_core::schedule::ScheduleRow;
use noisemia_core::trainer::EpochStats;

use crate::container::write_atomic;

pub const SCORES_HEADER: &str = "sample_id,method,label,score";
pub const SCHEDULE_HEADER: &str = "kind,snr_T,sqrt_alpha_bar_T";
pub const LOSS_HEADER: &str = "epoch,loss,skipped";
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,member_count,nonmember_count";
const DIGEST_PREFIX: &str = "# config_digest=";

fn table(digest_hex: &str, header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("{DIGEST_PREFIX}{digest_hex}\n{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

pub fn schedule_csv(digest_hex: &str, rows: &[ScheduleRow]) -> String {
    table(
        digest_hex,
        SCHEDULE_HEADER,
        rows.iter().map(|r| format!("{},{:.5e},{:.5e}", r.kind, r.snr_last, r.sqrt_alpha_bar_last)),
    )
}

/// Scores use the shortest representation that parses back to the same bits.
pub fn scores_csv(digest_hex: &str, records: &[ScoreRecord]) -> String {
    table(
        digest_hex,
        SCORES_HEADER,
        records.iter().map(|r| format!("{},{},{},{}", r.sample_id, r.method, r.label.name(), r.score)),
    )
}

pub fn loss_csv(digest_hex: &str, history: &[EpochStats]) -> String {
    table(digest_hex, LOSS_HEADER, history.iter().map(|e| format!("{},{},{}", e.epoch, e.loss, e.skipped)))
}

pub fn histogram_csv(digest_hex: &str, h: &Histogram) -> String {
    let rows = (0..h.member_counts.len()).map(|i| {
        let mut row = String::new();
        let _ = write!(row, "{},{},{},{}", h.edges[i], h.edges[i + 1], h.member_counts[i], h.nonmember_counts[i]);
        row
    });
    table(digest_hex, HISTOGRAM_HEADER, rows)
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// A parsed table: the embedded digest and the data rows split on commas.
pub struct Parsed {
    pub digest_hex: String,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_table(text: &str, header: &str) -> anyhow::Result<Parsed> {
    let mut lines = text.lines();
    let digest_hex = lines
        .next()
        .and_then(|l| l.strip_prefix(DIGEST_PREFIX))
        .ok_or_else(|| anyhow!("missing `{DIGEST_PREFIX}` line"))?
        .to_string();
    match lines.next() {
        Some(h) if h == header => {}
        other => bail!("expected header `{header}`, found {other:?}"),
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != width {
            bail!("row {} has {} fields, expected {width}", i + 1, fields.len());
        }
        rows.push(fields);
    }
    Ok(Parsed { digest_hex, rows })
}

pub fn parse_scores(text: &str) -> anyhow::Result<(String, Vec<ScoreRecord>)> {
    let parsed = parse_table(text, SCORES_HEADER)?;
    let records = parsed
        .rows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let ctx = || format!("scores row {}", i + 1);
            Ok(ScoreRecord {
                sample_id: f[0].parse().with_context(ctx)?,
                method: f[1].parse::<Method>().map_err(|e| anyhow!("{e}")).with_context(ctx)?,
                label: f[2].parse::<Membership>().map_err(|e| anyhow!("{e}")).with_context(ctx)?,
                score: f[3].parse().with_context(ctx)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((parsed.digest_hex, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_rows_use_five_digit_exponent_form() {
        let rows = [ScheduleRow {
            kind: noisemia_core::schedule::ScheduleKind::Linear,
            snr_last: 4.0358e-5,
            sqrt_alpha_bar_last: 0.0063528,
        }];
        let csv = schedule_csv("ab", &rows);
        assert_eq!(csv, "# config_digest=ab\nkind,snr_T,sqrt_alpha_bar_T\nlinear,4.03580e-5,6.35280e-3\n");
        let parsed = parse_table(&csv, SCHEDULE_HEADER).unwrap();
        assert_eq!(parsed.rows[0][1].parse::<f64>().unwrap(), 4.0358e-5);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(parse_scores("sample_id,method,label,score\n").is_err());
        assert!(parse_scores("# config_digest=x\nid,score\n").is_err());
        assert!(parse_scores("# config_digest=x\nsample_id,method,label,score\n1,inversion,member\n").is_err());
        assert!(parse_scores("# config_digest=x\nsample_id,method,label,score\n1,guess,member,0.1\n").is_err());
    }

    proptest! {
        #[test]
        fn scores_round_trip_bit_exact(rows in prop::collection::vec((0usize..10_000, 0usize..3, any::<bool>(), any::<f64>()), 0..40)) {
            let records: Vec<ScoreRecord> = rows
                .into_iter()
                .filter(|r| r.3.is_finite())
                .map(|(id, m, member, score)| ScoreRecord {
                    sample_id: id,
                    method: Method::ALL[m],
                    label: if member { Membership::Member } else { Membership::Nonmember },
                    score,
                })
                .collect();
            let (digest, back) = parse_scores(&scores_csv("d1", &records)).unwrap();
            prop_assert_eq!(digest, "d1");
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
                prop_assert_eq!((a.sample_id, a.method, a.label), (b.sample_id, b.method, b.label));
            }
        }
    }
}
