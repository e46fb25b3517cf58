//! Worst-case execution time tables, keyed by category and batch size.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, Duration, Shape};

/// Dense WCET lookup table. For each category, entry `b - 1` holds the
/// worst-case cost of a batch of `b` frames, for every `b` up to the
/// category's maximum batch size.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionProfile {
    tables: BTreeMap<Category, Vec<Duration>>,
}

impl ExecutionProfile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the table for `category`. `wcets[b - 1]` is the cost of batch `b`.
    pub fn insert(&mut self, category: Category, wcets: Vec<Duration>) -> Result<()> {
        if self.tables.contains_key(&category) {
            return Err(Error::DuplicateCategory(category));
        }
        if wcets.is_empty() {
            return Err(Error::MissingBatchSize { category, batch: 1 });
        }
        if let Some(i) = wcets.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::MonotonicityViolation {
                category,
                batch: i as u32 + 1,
                next: i as u32 + 2,
            });
        }
        self.tables.insert(category, wcets);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn contains(&self, category: &Category) -> bool {
        self.tables.contains_key(category)
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.tables.keys()
    }

    /// Number of (category, batch size) entries.
    pub fn entry_count(&self) -> usize {
        self.tables.values().map(Vec::len).sum()
    }

    pub fn max_batch(&self, category: &Category) -> Result<u32> {
        self.table(category).map(|t| t.len() as u32)
    }

    pub fn lookup_wcet(&self, category: &Category, batch_size: u32) -> Result<Duration> {
        let table = self.table(category)?;
        if batch_size == 0 || batch_size as usize > table.len() {
            return Err(Error::BatchTooLarge {
                category: category.clone(),
                batch: batch_size,
                max: table.len() as u32,
            });
        }
        Ok(table[batch_size as usize - 1])
    }

    /// Cost of `frames` frames when split into batches of at most `max_batch`.
    /// Zero frames cost nothing.
    pub fn split_cost(&self, category: &Category, frames: u64) -> Result<Duration> {
        let max = u64::from(self.max_batch(category)?);
        let full = frames / max;
        let rest = frames % max;
        let mut cost = 0;
        if full > 0 {
            cost += full * self.lookup_wcet(category, max as u32)?;
        }
        if rest > 0 {
            cost += self.lookup_wcet(category, rest as u32)?;
        }
        Ok(cost)
    }

    fn table(&self, category: &Category) -> Result<&Vec<Duration>> {
        self.tables
            .get(category)
            .ok_or_else(|| Error::UnknownCategory(category.clone()))
    }
}

/// Batch sizes produced when `n` frames are split by `max_batch`: full
/// batches first, then the remainder.
pub fn chunk_sizes(n: usize, max_batch: usize) -> Vec<usize> {
    let max_batch = max_batch.max(1);
    let mut sizes = vec![max_batch; n / max_batch];
    if n % max_batch > 0 {
        sizes.push(n % max_batch);
    }
    sizes
}

/// One row of a synthetic profile: `wcet(b) = base_us + b * per_frame_us`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRow {
    pub model: String,
    pub shape: Shape,
    pub base_us: Duration,
    pub per_frame_us: Duration,
    pub max_batch: u32,
}

/// Builds an affine profile from `rows`.
///
/// Each row also yields a table for its half-resolution shape (the shape
/// the adaptation policy downgrades to) with the per-frame cost scaled by
/// the area ratio, unless that shape is listed explicitly.
pub fn synth_profile(rows: &[SynthRow]) -> Result<ExecutionProfile> {
    let mut profile = ExecutionProfile::new();
    for row in rows {
        if row.max_batch == 0 {
            return Err(Error::InvalidConfig(format!(
                "max batch for {}@{} must be at least 1",
                row.model, row.shape
            )));
        }
        let affine = (1..=u64::from(row.max_batch))
            .map(|b| row.base_us + b * row.per_frame_us)
            .collect();
        profile.insert(Category::new(row.model.clone(), row.shape), affine)?;
    }
    for row in rows {
        let half = row.shape.halved();
        let category = Category::new(row.model.clone(), half);
        if half == row.shape || profile.contains(&category) {
            continue;
        }
        let per = row.per_frame_us * half.area() / row.shape.area();
        let table = (1..=u64::from(row.max_batch))
            .map(|b| row.base_us + b * per)
            .collect();
        profile.insert(category, table)?;
    }
    Ok(profile)
}

/// Affine rows whose batch-1 costs at 3x224x224 match measured single-model
/// latencies on a desktop-class GPU; larger shapes scale the per-frame term
/// by pixel area.
pub fn desktop_rows(shapes: &[Shape], max_batch: u32) -> Vec<SynthRow> {
    const MODELS: [(&str, u64, u64); 6] = [
        ("rn50", 2_500, 1_000),
        ("rn101", 4_400, 2_000),
        ("rn152", 6_000, 3_000),
        ("vgg16", 2_500, 2_000),
        ("vgg19", 3_000, 2_300),
        ("inception", 6_300, 3_000),
    ];
    let reference = 224 * 224;
    MODELS
        .iter()
        .flat_map(|&(model, base, per)| {
            shapes.iter().map(move |&shape| SynthRow {
                model: model.to_string(),
                shape,
                base_us: base,
                per_frame_us: per * shape.area() / reference,
                max_batch,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    model: String,
    shape: Shape,
    batch_size: u32,
    wcet_us: Duration,
}

/// Writes one JSON record per line, sorted by category then batch size.
pub fn write_profile<W: Write>(profile: &ExecutionProfile, mut out: W) -> Result<()> {
    for (category, table) in &profile.tables {
        for (i, &wcet_us) in table.iter().enumerate() {
            let record = ProfileRecord {
                model: category.model.clone(),
                shape: category.shape,
                batch_size: i as u32 + 1,
                wcet_us,
            };
            let line = serde_json::to_string(&record).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_profile<R: BufRead>(input: R) -> Result<ExecutionProfile> {
    let mut raw: BTreeMap<Category, BTreeMap<u32, Duration>> = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ProfileRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.batch_size == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "batch_size must be at least 1".into(),
            });
        }
        let category = Category::new(record.model, record.shape);
        let table = raw.entry(category.clone()).or_default();
        if table.insert(record.batch_size, record.wcet_us).is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate entry for {category} batch {}", record.batch_size),
            });
        }
    }

    let mut profile = ExecutionProfile::new();
    for (category, table) in raw {
        let mut dense = Vec::with_capacity(table.len());
        for (expected, (&batch, &wcet)) in (1u32..).zip(&table) {
            if batch != expected {
                return Err(Error::MissingBatchSize {
                    category,
                    batch: expected,
                });
            }
            dense.push(wcet);
        }
        profile.insert(category, dense)?;
    }
    Ok(profile)
}

pub fn save_profile(profile: &ExecutionProfile, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_profile(profile, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<ExecutionProfile> {
    let file = fs::File::open(path)?;
    read_profile(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(s: &str) -> Shape {
        s.parse().unwrap()
    }

    fn row(model: &str, s: &str, base: u64, per: u64, max: u32) -> SynthRow {
        SynthRow {
            model: model.into(),
            shape: shape(s),
            base_us: base,
            per_frame_us: per,
            max_batch: max,
        }
    }

    #[test]
    fn affine_entries() {
        let p = synth_profile(&[row("m", "3x224x224", 2_000, 1_000, 4)]).unwrap();
        let cat = Category::new("m", shape("3x224x224"));
        let got: Vec<_> = (1..=4).map(|b| p.lookup_wcet(&cat, b).unwrap()).collect();
        assert_eq!(got, vec![3_000, 4_000, 5_000, 6_000]);
    }

    #[test]
    fn affine_batch_one() {
        let p = synth_profile(&[row("m", "3x8x8", 1_000, 500, 2)]).unwrap();
        assert_eq!(p.lookup_wcet(&Category::new("m", shape("3x8x8")), 1).unwrap(), 1_500);
    }

    #[test]
    fn zero_slope_is_constant() {
        let p = synth_profile(&[row("m", "3x8x8", 1_000, 0, 3)]).unwrap();
        let cat = Category::new("m", shape("3x8x8"));
        assert!((1..=3).all(|b| p.lookup_wcet(&cat, b).unwrap() == 1_000));
    }

    #[test]
    fn half_shape_tables_scale_by_area() {
        let p = synth_profile(&[row("m", "3x224x224", 2_000, 1_000, 4)]).unwrap();
        let half = Category::new("m", shape("3x112x112"));
        assert_eq!(p.lookup_wcet(&half, 1).unwrap(), 2_250);
        assert_eq!(p.lookup_wcet(&half, 4).unwrap(), 3_000);
        assert_eq!(p.entry_count(), 8);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let rows = [
            row("m", "3x4x4", 1, 1, 1),
            row("m", "3x4x4", 2, 2, 2),
        ];
        assert!(matches!(synth_profile(&rows), Err(Error::DuplicateCategory(_))));
    }

    #[test]
    fn batch_too_large_and_unknown() {
        let p = synth_profile(&[row("m", "3x4x4", 1, 1, 2)]).unwrap();
        let cat = Category::new("m", shape("3x4x4"));
        assert!(matches!(
            p.lookup_wcet(&cat, 3),
            Err(Error::BatchTooLarge { max: 2, .. })
        ));
        let other = Category::new("x", shape("3x4x4"));
        assert!(matches!(p.lookup_wcet(&other, 1), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn desktop_rn50_matches_measurement() {
        let p = synth_profile(&desktop_rows(&[shape("3x224x224")], 32)).unwrap();
        let cat = Category::new("rn50", shape("3x224x224"));
        assert_eq!(p.lookup_wcet(&cat, 1).unwrap(), 3_500);
    }

    #[test]
    fn split_cost_uses_full_batches_then_rest() {
        let p = synth_profile(&[row("m", "3x4x4", 2_000, 1_000, 4)]).unwrap();
        let cat = Category::new("m", shape("3x4x4"));
        assert_eq!(p.split_cost(&cat, 0).unwrap(), 0);
        assert_eq!(p.split_cost(&cat, 4).unwrap(), 6_000);
        assert_eq!(p.split_cost(&cat, 9).unwrap(), 6_000 * 2 + 3_000);
        assert_eq!(chunk_sizes(9, 4), vec![4, 4, 1]);
        assert_eq!(chunk_sizes(0, 4), Vec::<usize>::new());
    }

    #[test]
    fn read_rejects_decreasing_table() {
        let text = concat!(
            r#"{"model":"m","shape":[3,4,4],"batch_size":1,"wcet_us":500}"#,
            "\n",
            r#"{"model":"m","shape":[3,4,4],"batch_size":2,"wcet_us":400}"#,
            "\n"
        );
        assert!(matches!(
            read_profile(text.as_bytes()),
            Err(Error::MonotonicityViolation { batch: 1, next: 2, .. })
        ));
    }

    #[test]
    fn read_reports_line_of_bad_record() {
        let text = concat!(
            r#"{"model":"m","shape":[3,4,4],"batch_size":1,"wcet_us":500}"#,
            "\n",
            "not json\n"
        );
        assert!(matches!(read_profile(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn read_rejects_gap() {
        let text = r#"{"model":"m","shape":[3,4,4],"batch_size":2,"wcet_us":500}"#;
        assert!(matches!(
            read_profile(text.as_bytes()),
            Err(Error::MissingBatchSize { batch: 1, .. })
        ));
    }

    #[test]
    fn empty_input_is_empty_profile() {
        let p = read_profile("".as_bytes()).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn save_then_load_round_trips() {
        let p = synth_profile(&[row("a", "3x4x6", 10, 3, 3)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_profile(&p, &path).unwrap();
        assert_eq!(load_profile(&path).unwrap(), p);
    }
}
