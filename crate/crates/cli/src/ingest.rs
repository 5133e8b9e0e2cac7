//! CSV ingestion and translation of calendar weeks to weeks since release.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use songdemand_core::{CovariatePath, DemandCurve, Stratum};

use crate::error::{AppError, AppResult};

/// Header names of the required columns plus the covariate columns, which
/// are split into endogenous (`x`) and exogenous (`z`) inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub song: String,
    pub artist: String,
    pub stratum: String,
    pub week_start: String,
    pub count: String,
    pub release_date: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            song: "song_id".into(),
            artist: "artist_id".into(),
            stratum: "stratum".into(),
            week_start: "week_start".into(),
            count: "streams".into(),
            release_date: "release_date".into(),
            x: Vec::new(),
            z: Vec::new(),
        }
    }
}

impl ColumnMapping {
    /// Default names, with every `x*` / `z*` header taken as a covariate.
    pub fn infer(headers: &[String]) -> Self {
        let mut m = Self::default();
        let numbered = |prefix: char, h: &str| {
            h.starts_with(prefix) && h.len() > 1 && h[1..].chars().all(|c| c.is_ascii_digit())
        };
        m.x = headers.iter().filter(|h| numbered('x', h)).cloned().collect();
        m.z = headers.iter().filter(|h| numbered('z', h)).cloned().collect();
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub song_id: String,
    pub artist_id: String,
    pub stratum: String,
    pub week_start: NaiveDate,
    pub count: u64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub release_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: Vec<IngestRecord>,
    pub rejects: Vec<Reject>,
    pub warnings: Vec<String>,
}

fn column(headers: &[String], name: &str) -> AppResult<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| AppError::Validation(format!("missing required column `{name}`")))
}

fn parse_date(raw: &str, what: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d")
        .map_err(|_| format!("unparseable {what} `{raw}` (expected YYYY-MM-DD)"))
}

fn parse_count(raw: &str) -> Result<u64, String> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<u64>() {
        return Ok(v);
    }
    match raw.parse::<i64>() {
        Ok(v) if v < 0 => Err(format!("negative count {v}")),
        _ => Err(format!("unparseable count `{raw}`")),
    }
}

fn parse_covariate(raw: &str, name: &str) -> Result<f64, String> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| format!("unparseable covariate {name} `{raw}`"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("covariate {name} = {v} outside [0, 1]"));
    }
    Ok(v)
}

struct Columns {
    song: usize,
    artist: usize,
    stratum: usize,
    week: usize,
    count: usize,
    release: usize,
    x: Vec<(usize, String)>,
    z: Vec<(usize, String)>,
}

impl Columns {
    fn resolve(headers: &[String], m: &ColumnMapping) -> AppResult<Self> {
        let named = |names: &[String]| -> AppResult<Vec<(usize, String)>> {
            names.iter().map(|n| Ok((column(headers, n)?, n.clone()))).collect()
        };
        Ok(Self {
            song: column(headers, &m.song)?,
            artist: column(headers, &m.artist)?,
            stratum: column(headers, &m.stratum)?,
            week: column(headers, &m.week_start)?,
            count: column(headers, &m.count)?,
            release: column(headers, &m.release_date)?,
            x: named(&m.x)?,
            z: named(&m.z)?,
        })
    }

    fn parse(&self, row: &csv::StringRecord) -> Result<IngestRecord, String> {
        let field = |i: usize| row.get(i).unwrap_or("");
        let text = |i: usize, what: &str| {
            let v = field(i).trim();
            if v.is_empty() {
                Err(format!("empty {what}"))
            } else {
                Ok(v.to_string())
            }
        };
        let covariates = |cols: &[(usize, String)]| {
            cols.iter().map(|(i, n)| parse_covariate(field(*i), n)).collect::<Result<Vec<_>, _>>()
        };
        Ok(IngestRecord {
            song_id: text(self.song, "song id")?,
            artist_id: text(self.artist, "artist id")?,
            stratum: text(self.stratum, "stratum")?,
            week_start: parse_date(field(self.week), "week start")?,
            count: parse_count(field(self.count))?,
            x: covariates(&self.x)?,
            z: covariates(&self.z)?,
            release_date: parse_date(field(self.release), "release date")?,
        })
    }
}

/// Parses and validates every row. Bad rows go to `rejects`; rows repeating a
/// (song, stratum, week) key are summed into the first with a warning.
pub fn ingest_csv<R: Read>(input: R, mapping: Option<&ColumnMapping>) -> AppResult<IngestReport> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let inferred;
    let mapping = match mapping {
        Some(m) => m,
        None => {
            inferred = ColumnMapping::infer(&headers);
            &inferred
        }
    };
    let cols = Columns::resolve(&headers, mapping)?;

    let mut records: Vec<IngestRecord> = Vec::new();
    let mut index: BTreeMap<(String, String, NaiveDate), usize> = BTreeMap::new();
    let mut release: BTreeMap<String, (NaiveDate, String)> = BTreeMap::new();
    let mut rejects = Vec::new();
    let mut warnings = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject { line, reason: format!("malformed row: {e}") });
                continue;
            }
        };
        let rec = match cols.parse(&row) {
            Ok(r) => r,
            Err(reason) => {
                rejects.push(Reject { line, reason });
                continue;
            }
        };
        if let Some((date, artist)) = release.get(&rec.song_id) {
            if *date != rec.release_date || *artist != rec.artist_id {
                rejects.push(Reject {
                    line,
                    reason: format!(
                        "song {} already has release date {date} and artist {artist}",
                        rec.song_id
                    ),
                });
                continue;
            }
        } else {
            release.insert(rec.song_id.clone(), (rec.release_date, rec.artist_id.clone()));
        }
        let key = (rec.song_id.clone(), rec.stratum.clone(), rec.week_start);
        match index.get(&key) {
            Some(&k) => {
                let first = &mut records[k];
                first.count += rec.count;
                let note = if first.x != rec.x || first.z != rec.z {
                    "; covariates of the first row kept"
                } else {
                    ""
                };
                warnings.push(format!(
                    "line {line}: duplicate row for song {} stratum {} week {} summed{note}",
                    key.0, key.1, key.2
                ));
            }
            None => {
                index.insert(key, records.len());
                records.push(rec);
            }
        }
    }
    Ok(IngestReport { records, rejects, warnings })
}

/// One song's demand after origin translation: one curve per stratum, all on
/// a common horizon, plus their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongSeries {
    pub song_id: String,
    pub artist_id: String,
    pub release_date: NaiveDate,
    pub strata: Vec<String>,
    pub curves: Vec<DemandCurve>,
    pub covariates: Vec<CovariatePath>,
    pub aggregate: DemandCurve,
    /// Per-week mean of the strata covariates.
    pub aggregate_covariates: CovariatePath,
    pub warnings: Vec<String>,
}

/// Week index is whole weeks since the release date, so weeks are anchored at
/// the release weekday. Missing weeks become zero counts with zero covariates.
pub fn translate_to_origin(records: &[IngestRecord]) -> AppResult<SongSeries> {
    let first = records
        .first()
        .ok_or_else(|| AppError::Validation("no records to translate".into()))?;
    if records.iter().any(|r| r.song_id != first.song_id) {
        return Err(AppError::Validation("records span more than one song".into()));
    }
    let (channels, ambient) = (first.x.len(), first.z.len());
    if records.iter().any(|r| r.x.len() != channels || r.z.len() != ambient) {
        return Err(AppError::Validation("records disagree on covariate columns".into()));
    }
    let release = first.release_date;
    let mut warnings = Vec::new();
    let mut cells: BTreeMap<String, BTreeMap<usize, (u64, Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    let mut dropped = 0;
    for r in records {
        let days = (r.week_start - release).num_days();
        if days < 0 {
            dropped += 1;
            continue;
        }
        let week = (days / 7) as usize;
        let stratum = cells.entry(r.stratum.clone()).or_default();
        match stratum.get_mut(&week) {
            Some(cell) => {
                cell.0 += r.count;
                warnings.push(format!(
                    "stratum {} week {week}: several rows fall in one week and were summed",
                    r.stratum
                ));
            }
            None => {
                stratum.insert(week, (r.count, r.x.clone(), r.z.clone()));
            }
        }
    }
    if dropped > 0 {
        warnings.push(format!("{dropped} pre-release row(s) dropped"));
    }
    let horizon = cells
        .values()
        .filter_map(|s| s.keys().next_back())
        .max()
        .map(|w| w + 1)
        .ok_or_else(|| {
            AppError::Validation(format!("song {} has no post-release data", first.song_id))
        })?;

    let strata: Vec<String> = cells.keys().cloned().collect();
    let mut curves = Vec::new();
    let mut covariates = Vec::new();
    let mut sum_x = vec![vec![0.0; channels]; horizon];
    let mut sum_z = vec![vec![0.0; ambient]; horizon];
    for (j, weeks) in cells.values().enumerate() {
        let mut values = vec![0u64; horizon];
        let mut x = vec![vec![0.0; channels]; horizon];
        let mut z = vec![vec![0.0; ambient]; horizon];
        for (&t, (count, xt, zt)) in weeks {
            values[t] = *count;
            x[t] = xt.clone();
            z[t] = zt.clone();
        }
        for t in 0..horizon {
            for c in 0..channels {
                sum_x[t][c] += x[t][c] / strata.len() as f64;
            }
            for d in 0..ambient {
                sum_z[t][d] += z[t][d] / strata.len() as f64;
            }
        }
        curves.push(DemandCurve::new(&first.song_id, Stratum::Segment(j as u32), values));
        covariates.push(CovariatePath::new(x, z)?);
    }
    let aggregate = songdemand_core::model::aggregate_demand(&curves)?;
    Ok(SongSeries {
        song_id: first.song_id.clone(),
        artist_id: first.artist_id.clone(),
        release_date: release,
        strata,
        curves,
        covariates,
        aggregate,
        aggregate_covariates: CovariatePath::new(sum_x, sum_z)?,
        warnings,
    })
}

/// Groups records by song, in song-id order.
pub fn songs_from_records(records: &[IngestRecord]) -> AppResult<Vec<SongSeries>> {
    let mut by_song: BTreeMap<&str, Vec<IngestRecord>> = BTreeMap::new();
    for r in records {
        by_song.entry(&r.song_id).or_default().push(r.clone());
    }
    by_song.values().map(|rs| translate_to_origin(rs)).collect()
}

/// Inverse of ingestion: one row per stratum and week, zero weeks included.
pub fn export_csv(song: &SongSeries) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let channels = song.aggregate_covariates.channels();
    let ambient = song.aggregate_covariates.ambient();
    let mut header: Vec<String> =
        ["song_id", "artist_id", "stratum", "week_start", "streams", "release_date"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend((0..channels).map(|c| format!("x{c}")));
    header.extend((0..ambient).map(|d| format!("z{d}")));
    w.write_record(&header)?;
    for (j, curve) in song.curves.iter().enumerate() {
        for (t, count) in curve.values.iter().enumerate() {
            let week = song.release_date + chrono::Days::new(7 * t as u64);
            let mut row = vec![
                song.song_id.clone(),
                song.artist_id.clone(),
                song.strata[j].clone(),
                week.to_string(),
                count.to_string(),
                song.release_date.to_string(),
            ];
            row.extend(song.covariates[j].x(t).iter().map(|v| v.to_string()));
            row.extend(song.covariates[j].z(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| AppError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AppError::Internal(e.to_string()))
}
