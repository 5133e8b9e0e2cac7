//! Synthetic demand for `simulate`: scenario files and a built-in default.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use songdemand_core::dist::{sample_negbin, sample_poisson};
use songdemand_core::envelope::{ChangePoints, EnvelopeFit, NodeValues, PhaseEffects};
use songdemand_core::model::simulate_curves;
use songdemand_core::{AffinityModel, CovariatePath, DemandRng, Link, Membership, SegmentCovering};

use crate::error::{AppError, AppResult};
use crate::ingest::IngestRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub songs: Vec<SongScenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SongScenario {
    /// Negative-Binomial (or Poisson) counts around a four-phase envelope.
    Envelope(EnvelopeScenario),
    /// Bernoulli listeners in overlapping segments.
    Counting(CountingScenario),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumShare {
    pub label: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeScenario {
    pub song_id: String,
    pub artist_id: String,
    pub release_date: NaiveDate,
    pub horizon: usize,
    pub changepoints: [usize; 4],
    pub nodes: [f64; 3],
    /// Negative-Binomial size; Poisson when absent.
    #[serde(default)]
    pub dispersion: Option<f64>,
    #[serde(default = "single_stratum")]
    pub strata: Vec<StratumShare>,
    /// Effects of uniformly drawn covariates, shared by all phases.
    #[serde(default)]
    pub theta: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

fn single_stratum() -> Vec<StratumShare> {
    vec![StratumShare { label: "all".into(), share: 1.0 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub label: String,
    /// Half-open listener range `[start, end)`; ranges may overlap.
    pub members: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingScenario {
    pub song_id: String,
    pub artist_id: String,
    pub release_date: NaiveDate,
    pub population: usize,
    pub horizon: usize,
    pub segments: Vec<SegmentSpec>,
    pub theta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    #[serde(default)]
    pub link: Link,
}

impl SongScenario {
    fn dims(&self) -> (usize, usize) {
        match self {
            SongScenario::Envelope(e) => (e.theta.len(), e.gamma.len()),
            SongScenario::Counting(c) => (
                c.theta.first().map_or(0, Vec::len),
                c.gamma.first().map_or(0, Vec::len),
            ),
        }
    }
}

impl Scenario {
    pub fn from_json(raw: &[u8]) -> AppResult<Self> {
        let s: Scenario = serde_json::from_slice(raw)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> AppResult<()> {
        let first = self
            .songs
            .first()
            .ok_or_else(|| AppError::Validation("scenario has no songs".into()))?;
        if self.songs.iter().any(|s| s.dims() != first.dims()) {
            return Err(AppError::Validation(
                "all scenario songs must share covariate dimensions".into(),
            ));
        }
        Ok(())
    }

    /// Three envelope songs of different shapes and one counting-process song.
    pub fn builtin() -> Self {
        let release = NaiveDate::from_ymd_opt(2024, 1, 5).expect("valid date");
        let strata = vec![
            StratumShare { label: "dsp-a".into(), share: 0.6 },
            StratumShare { label: "dsp-b".into(), share: 0.4 },
        ];
        let envelope = |id: &str, cp: [usize; 4], nodes: [f64; 3]| {
            SongScenario::Envelope(EnvelopeScenario {
                song_id: id.into(),
                artist_id: "artist-1".into(),
                release_date: release,
                horizon: 40,
                changepoints: cp,
                nodes,
                dispersion: Some(50.0),
                strata: strata.clone(),
                theta: vec![0.8],
                gamma: vec![0.2],
            })
        };
        Scenario {
            songs: vec![
                envelope("song-a", [5, 15, 25, 39], [1000.0, 800.0, 200.0]),
                envelope("song-b", [2, 6, 20, 30], [3000.0, 1200.0, 900.0]),
                envelope("song-c", [10, 20, 28, 36], [600.0, 550.0, 100.0]),
                SongScenario::Counting(CountingScenario {
                    song_id: "song-d".into(),
                    artist_id: "artist-2".into(),
                    release_date: release,
                    population: 2000,
                    horizon: 30,
                    segments: vec![
                        SegmentSpec { label: "dsp-a".into(), members: [0, 1200] },
                        SegmentSpec { label: "dsp-b".into(), members: [1000, 2000] },
                    ],
                    theta: vec![vec![0.3], vec![0.5]],
                    gamma: vec![vec![0.2], vec![0.1]],
                    link: Link::IdentityClipped,
                }),
            ],
        }
    }

    /// Song `i` draws from stream `i` of `seed`, so songs are independent of
    /// their neighbours in the file.
    pub fn simulate(&self, seed: u64) -> AppResult<Vec<IngestRecord>> {
        self.validate()?;
        let base = DemandRng::seed_from(seed);
        let mut out = Vec::new();
        for (i, song) in self.songs.iter().enumerate() {
            let mut rng = base.split(i as u64);
            match song {
                SongScenario::Envelope(e) => out.extend(simulate_envelope(e, &mut rng)?),
                SongScenario::Counting(c) => out.extend(simulate_counting(c, &mut rng)?),
            }
        }
        Ok(out)
    }
}

fn uniform_path(horizon: usize, channels: usize, ambient: usize, rng: &mut DemandRng) -> AppResult<CovariatePath> {
    let mut x = Vec::with_capacity(horizon);
    let mut z = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        x.push((0..channels).map(|_| rng.uniform()).collect());
        z.push((0..ambient).map(|_| rng.uniform()).collect());
    }
    Ok(CovariatePath::new(x, z)?)
}

fn week(release: NaiveDate, t: usize) -> NaiveDate {
    release + chrono::Days::new(7 * t as u64)
}

fn simulate_envelope(s: &EnvelopeScenario, rng: &mut DemandRng) -> AppResult<Vec<IngestRecord>> {
    let [a, su, d, r] = s.changepoints;
    let cp = ChangePoints::new(a, su, d, r)?;
    cp.check_horizon(s.horizon)?;
    if s.nodes.iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
        return Err(AppError::Validation("node values must be non-negative".into()));
    }
    if s.strata.is_empty() || s.strata.iter().any(|st| !(st.share > 0.0)) {
        return Err(AppError::Validation("strata need positive shares".into()));
    }
    if let Some(w) = s.dispersion {
        if !(w > 0.0 && w.is_finite()) {
            return Err(AppError::Validation("dispersion must be positive".into()));
        }
    }
    let effects = PhaseEffects { theta: s.theta.clone(), gamma: s.gamma.clone() };
    let fit = EnvelopeFit::new(cp, NodeValues { attack: s.nodes[0], sustain: s.nodes[1], decay: s.nodes[2] })
        .with_effects(std::array::from_fn(|_| effects.clone()));
    let path = uniform_path(s.horizon, s.theta.len(), s.gamma.len(), rng)?;
    let mut out = Vec::new();
    for t in 0..s.horizon {
        let mean = fit.mean_with_covariates(t, path.x(t), path.z(t));
        for st in &s.strata {
            let mu = st.share * mean;
            let count = match s.dispersion {
                _ if mu <= 0.0 => 0,
                Some(w) => sample_negbin(mu, w, rng),
                None => sample_poisson(mu, rng),
            };
            out.push(IngestRecord {
                song_id: s.song_id.clone(),
                artist_id: s.artist_id.clone(),
                stratum: st.label.clone(),
                week_start: week(s.release_date, t),
                count,
                x: path.x(t).to_vec(),
                z: path.z(t).to_vec(),
                release_date: s.release_date,
            });
        }
    }
    Ok(out)
}

fn simulate_counting(s: &CountingScenario, rng: &mut DemandRng) -> AppResult<Vec<IngestRecord>> {
    let segments: Vec<Membership> = s
        .segments
        .iter()
        .map(|seg| {
            let [lo, hi] = seg.members;
            if lo >= hi || hi > s.population {
                return Err(AppError::Validation(format!(
                    "segment {} range {lo}..{hi} is empty or outside the population",
                    seg.label
                )));
            }
            Ok((lo..hi).collect())
        })
        .collect::<AppResult<_>>()?;
    let covering = SegmentCovering::constant(s.population, s.horizon, segments)?;
    let model = AffinityModel::new(s.theta.clone(), s.gamma.clone(), s.link)?;
    let path = uniform_path(s.horizon, model.channels(), model.ambient(), rng)?;
    let curves = simulate_curves(&s.song_id, &covering, &model, &path, rng)?;
    let mut out = Vec::new();
    for t in 0..s.horizon {
        for (seg, curve) in s.segments.iter().zip(&curves) {
            out.push(IngestRecord {
                song_id: s.song_id.clone(),
                artist_id: s.artist_id.clone(),
                stratum: seg.label.clone(),
                week_start: week(s.release_date, t),
                count: curve.values[t],
                x: path.x(t).to_vec(),
                z: path.z(t).to_vec(),
                release_date: s.release_date,
            });
        }
    }
    Ok(out)
}

/// Records as CSV in the default ingestion layout.
pub fn records_to_csv(records: &[IngestRecord]) -> AppResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (channels, ambient) = records.first().map_or((0, 0), |r| (r.x.len(), r.z.len()));
    let mut header: Vec<String> =
        ["song_id", "artist_id", "stratum", "week_start", "streams", "release_date"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend((0..channels).map(|c| format!("x{c}")));
    header.extend((0..ambient).map(|d| format!("z{d}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.song_id.clone(),
            r.artist_id.clone(),
            r.stratum.clone(),
            r.week_start.to_string(),
            r.count.to_string(),
            r.release_date.to_string(),
        ];
        row.extend(r.x.iter().chain(&r.z).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AppError::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ingest_csv, songs_from_records};

    #[test]
    fn same_seed_same_records() {
        let s = Scenario::builtin();
        assert_eq!(s.simulate(7).unwrap(), s.simulate(7).unwrap());
        assert_ne!(s.simulate(7).unwrap(), s.simulate(8).unwrap());
    }

    #[test]
    fn simulated_csv_ingests_cleanly() {
        let records = Scenario::builtin().simulate(3).unwrap();
        let csv = records_to_csv(&records).unwrap();
        let report = ingest_csv(csv.as_bytes(), None).unwrap();
        assert!(report.rejects.is_empty(), "{:?}", report.rejects);
        assert_eq!(report.records, records);
        let songs = songs_from_records(&report.records).unwrap();
        assert_eq!(songs.len(), 4);
        assert_eq!(songs[0].aggregate.horizon(), 40);
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let mut s = Scenario::builtin();
        if let SongScenario::Envelope(e) = &mut s.songs[0] {
            e.theta.push(0.1);
        }
        assert!(s.validate().is_err());
    }
}
