//! Dataset files.
//!
//! `features.csv`: one line per image, `image_id,v1,...,v_n`.
//! `ratings.csv`: one line per rating, `user_id,image_id,score` with an
//! integer score. Lines starting with `#` and blank lines are ignored in
//! both; there is no header row.

use std::collections::HashSet;
use std::path::Path;

use metafbp::episodes::{RatingDataset, RatingRecord};
use metafbp::numerics::Tensor;

use crate::config::comment_block;
use crate::error::{CliError, CliResult};

pub const FEATURES_FILE: &str = "features.csv";
pub const RATINGS_FILE: &str = "ratings.csv";
pub const TRUTH_FILE: &str = "truth.json";

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn read_features(path: &Path) -> CliResult<(Vec<String>, Tensor)> {
    let fail = |line: u64, msg: String| CliError::Data(format!("{}:{line}: {msg}", path.display()));
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    let mut width = None;
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let line = line_of(&rec);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() < 2 {
            return Err(fail(line, "expected `image_id,v1,...`".into()));
        }
        let n = rec.len() - 1;
        if *width.get_or_insert(n) != n {
            return Err(fail(
                line,
                format!("expected {} feature values, found {n}", width.unwrap()),
            ));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(fail(line, format!("duplicate image id `{id}`")));
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| fail(line, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(fail(line, format!("non-finite feature value `{field}`")));
            }
            values.push(v);
        }
        ids.push(id);
    }
    let Some(width) = width else {
        return Err(CliError::Data(format!("{}: no images", path.display())));
    };
    Ok((ids.clone(), Tensor::new(vec![ids.len(), width], values)?))
}

pub fn read_ratings(path: &Path) -> CliResult<Vec<RatingRecord>> {
    let fail = |line: u64, msg: String| CliError::Data(format!("{}:{line}: {msg}", path.display()));
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let line = line_of(&rec);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 3 {
            return Err(fail(line, "expected `user_id,image_id,score`".into()));
        }
        let score: u8 = rec[2].parse().map_err(|_| {
            fail(
                line,
                format!("score `{}` is not a small non-negative integer", &rec[2]),
            )
        })?;
        out.push(RatingRecord {
            user: rec[0].to_string(),
            image: rec[1].to_string(),
            score,
        });
    }
    Ok(out)
}

/// Reads both files from `dir`.
pub fn read_dataset(dir: &Path, categories: u8) -> CliResult<RatingDataset> {
    let (ids, feats) = read_features(&dir.join(FEATURES_FILE))?;
    let ratings = read_ratings(&dir.join(RATINGS_FILE))?;
    RatingDataset::new(ids, feats, &ratings, categories)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn features_text(ds: &RatingDataset, config: &str) -> String {
    let mut out = comment_block(config);
    let feats = ds.features();
    for (i, id) in ds.image_ids().iter().enumerate() {
        out.push_str(id);
        for v in feats.row(i) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn ratings_text(ds: &RatingDataset, config: &str) -> String {
    let mut out = comment_block(config);
    for r in ds.records() {
        out.push_str(&format!("{},{},{}\n", r.user, r.image, r.score));
    }
    out
}
