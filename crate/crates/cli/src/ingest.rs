//! Battle-log CSV ingestion.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use btlinfer::model::{Battle, DesignAtom};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    ModelA,
    ModelB,
    Tie,
    TieBothBad,
}

impl Winner {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "model_a" => Some(Self::ModelA),
            "model_b" => Some(Self::ModelB),
            "tie" => Some(Self::Tie),
            "tie (bothbad)" => Some(Self::TieBothBad),
            _ => None,
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            Self::ModelA => "model_a",
            Self::ModelB => "model_b",
            Self::Tie => "tie",
            Self::TieBothBad => "tie (bothbad)",
        }
    }

    pub fn is_tie(&self) -> bool {
        matches!(self, Self::Tie | Self::TieBothBad)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BattleLogRecord {
    pub model_a: String,
    pub model_b: String,
    pub category: String,
    pub winner: Winner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    #[default]
    Drop,
    Half,
}

impl TiePolicy {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "drop" => Ok(Self::Drop),
            "half" => Ok(Self::Half),
            _ => Err(CliError::Config(format!("tie policy must be drop or half, got {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Drop => "drop",
            Self::Half => "half",
        }
    }
}

pub const BATTLE_HEADER: [&str; 4] = ["model_a", "model_b", "category", "winner"];

/// Reads records, checking the four required columns and winner tokens.
/// Line numbers in errors count the header as line 1.
pub fn read_records<R: Read>(reader: R) -> CliResult<Vec<BattleLogRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Parse(format!("missing column {name:?}")))
    };
    let (ia, ib, ic, iw) = (col("model_a")?, col("model_b")?, col("category")?, col("winner")?);
    let mut out = Vec::new();
    for (k, row) in r.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| CliError::Parse(format!("line {line}: {e}")))?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let (a, b) = (field(ia), field(ib));
        if a.is_empty() || b.is_empty() {
            return Err(CliError::Parse(format!("line {line}: empty model name")));
        }
        let w = field(iw);
        let winner = Winner::parse(&w).ok_or_else(|| CliError::Parse(format!("line {line}: unknown winner token {w:?}")))?;
        out.push(BattleLogRecord { model_a: a, model_b: b, category: field(ic), winner });
    }
    Ok(out)
}

pub fn read_records_path(path: &Path) -> CliResult<Vec<BattleLogRecord>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    read_records(f)
}

pub fn write_records(records: &[BattleLogRecord], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BATTLE_HEADER)?;
    for r in records {
        w.write_record([r.model_a.as_str(), r.model_b.as_str(), r.category.as_str(), r.winner.token()])?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column `source,target` CSV of category renames.
pub fn read_category_map(path: &Path) -> CliResult<HashMap<String, String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut map = HashMap::new();
    for (k, row) in r.records().enumerate() {
        let row = row?;
        if row.len() != 2 {
            return Err(CliError::Parse(format!("category map line {}: expected 2 fields", k + 1)));
        }
        if k == 0 && &row[0] == "source" && &row[1] == "target" {
            continue;
        }
        map.insert(row[0].to_string(), row[1].to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub top_k: Option<usize>,
    /// Categories absent from the map keep their own name.
    pub category_map: HashMap<String, String>,
    pub tie_policy: TiePolicy,
}

/// Battles with their name tables. `records` counts surviving log rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model_names: Vec<String>,
    pub category_names: Vec<String>,
    pub battles: Vec<Battle>,
    pub records: usize,
}

impl Dataset {
    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }
}

fn map_category<'a>(opts: &'a IngestOptions, c: &'a str) -> &'a str {
    opts.category_map.get(c).map_or(c, String::as_str)
}

/// Keeps rows whose models are both among the `top_k` most frequent (ties in
/// count broken by name) and builds index tables: models by descending
/// appearance count, categories alphabetically. Self-comparisons are dropped.
pub fn build_dataset(records: &[BattleLogRecord], opts: &IngestOptions) -> CliResult<Dataset> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model_a != r.model_b) {
        *counts.entry(&r.model_a).or_default() += 1;
        *counts.entry(&r.model_b).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if let Some(k) = opts.top_k {
        ranked.truncate(k);
    }
    let model_names: Vec<String> = ranked.iter().map(|(m, _)| m.to_string()).collect();
    let model_index: HashMap<&str, usize> = ranked.iter().enumerate().map(|(i, (m, _))| (*m, i)).collect();
    let kept: Vec<&BattleLogRecord> = records
        .iter()
        .filter(|r| r.model_a != r.model_b)
        .filter(|r| model_index.contains_key(r.model_a.as_str()) && model_index.contains_key(r.model_b.as_str()))
        .filter(|r| !(r.winner.is_tie() && opts.tie_policy == TiePolicy::Drop))
        .collect();
    let mut cats: Vec<String> = kept.iter().map(|r| map_category(opts, &r.category).to_string()).collect();
    cats.sort();
    cats.dedup();
    build_with_tables(&kept, model_names, cats, opts)
}

/// Indexes records against fixed name tables, dropping rows whose names are
/// not in the tables.
pub fn dataset_with_names(
    records: &[BattleLogRecord],
    model_names: &[String],
    category_names: &[String],
    opts: &IngestOptions,
) -> CliResult<Dataset> {
    let models: HashMap<&str, usize> = model_names.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let cats: HashMap<&str, usize> = category_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let kept: Vec<&BattleLogRecord> = records
        .iter()
        .filter(|r| r.model_a != r.model_b)
        .filter(|r| models.contains_key(r.model_a.as_str()) && models.contains_key(r.model_b.as_str()))
        .filter(|r| cats.contains_key(map_category(opts, &r.category)))
        .filter(|r| !(r.winner.is_tie() && opts.tie_policy == TiePolicy::Drop))
        .collect();
    build_with_tables(&kept, model_names.to_vec(), category_names.to_vec(), opts)
}

fn build_with_tables(
    kept: &[&BattleLogRecord],
    model_names: Vec<String>,
    category_names: Vec<String>,
    opts: &IngestOptions,
) -> CliResult<Dataset> {
    if kept.is_empty() {
        return Err(CliError::Parse("no records survive filtering".into()));
    }
    let models: HashMap<&str, usize> = model_names.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let cats: HashMap<&str, usize> = category_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut battles = Vec::with_capacity(kept.len());
    for r in kept {
        let u = cats[map_category(opts, &r.category)];
        let atom = DesignAtom::new(u, models[r.model_a.as_str()], models[r.model_b.as_str()])
            .map_err(|e| CliError::Parse(e.to_string()))?;
        match r.winner {
            Winner::ModelA => battles.push(Battle::new(atom, true)),
            Winner::ModelB => battles.push(Battle::new(atom, false)),
            Winner::Tie | Winner::TieBothBad => {
                battles.push(Battle::weighted(atom, true, 0.5));
                battles.push(Battle::weighted(atom, false, 0.5));
            }
        }
    }
    Ok(Dataset { model_names, category_names, battles, records: kept.len() })
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> CliResult<Dataset> {
    build_dataset(&read_records_path(path)?, opts)
}
