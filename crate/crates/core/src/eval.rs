//! Greedy evaluation, link-quality metrics and output tables.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::env::{distance, neighbor_slot, UavEnv};
use crate::error::Result;
use crate::policy::Team;
use crate::rollout::{rollout, Rollout};
use crate::trainer::stream;

const STREAM_EVAL_ENV: u64 = 11;
const STREAM_EVAL_ACTIONS: u64 = 12;

/// Link quality of the serving (nearest) UAV in one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkQuality {
    pub serving_agent: usize,
    /// Horizontal distance to the user, m.
    pub serving_distance: f64,
    pub snr_db: f64,
    /// Error probability at the maximum transmission time.
    pub error_rate: f64,
    /// Shortest transmission time meeting the target error, s; `None` when
    /// no time within the search bracket is enough.
    pub min_latency: Option<f64>,
    pub meets_requirement: bool,
}

pub fn link_quality(cfg: &Config, agents: &[[f64; 2]], target: [f64; 2]) -> Result<LinkQuality> {
    let p = cfg.channel();
    let req = cfg.requirement();
    let (serving_agent, serving_distance) = agents
        .iter()
        .map(|&a| distance(a, target))
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, d)| if d < best.1 { (i, d) } else { best },
        );
    let snr = channel::snr(serving_distance, p.altitude, &p)?;
    let error_rate = channel::error_rate(snr, p.max_transmission_time(), &p)?;
    let min_latency = channel::min_latency(snr, req.target_error, &p)?;
    let meets_requirement =
        error_rate <= req.target_error && min_latency.is_some_and(|t| t <= req.target_latency);
    Ok(LinkQuality {
        serving_agent,
        serving_distance,
        snr_db: channel::linear_to_db(snr),
        error_rate,
        min_latency,
        meets_requirement,
    })
}

/// One evaluated slot: the world after the joint move and the attention
/// state that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    /// 1-based slot index.
    pub slot: usize,
    pub agents: Vec<[f64; 2]>,
    pub target: [f64; 2],
    pub dist_to_target: Vec<f64>,
    pub link: LinkQuality,
    pub reward: f64,
    /// Colliding unordered pairs.
    pub collisions: Vec<[usize; 2]>,
    /// `sr[n][m] = w̄_{n,m}`, diagonal zero.
    pub sr: Vec<Vec<f64>>,
    /// Attention weights `w_{n,m}`, diagonal zero.
    pub weights: Vec<Vec<f64>>,
}

fn adjacency(values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = values.len();
    (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a == b {
                        0.0
                    } else {
                        values[a][neighbor_slot(a, b)]
                    }
                })
                .collect()
        })
        .collect()
}

pub fn records_from_rollout(
    cfg: &Config,
    episode: usize,
    ro: &Rollout,
) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::with_capacity(ro.infos.len());
    for (t, info) in ro.infos.iter().enumerate() {
        let world = &ro.worlds[t + 1];
        let n = world.agents.len();
        let collisions = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| [a, b]))
            .filter(|&[a, b]| info.collisions[a][b])
            .collect();
        let sr: Vec<Vec<f64>> = ro.decisions[t].iter().map(|d| d.sr.clone()).collect();
        let weights: Vec<Vec<f64>> = ro.decisions[t].iter().map(|d| d.weights.clone()).collect();
        out.push(MetricsRecord {
            episode,
            slot: t + 1,
            agents: world.agents.clone(),
            target: world.target,
            dist_to_target: info.dist_to_target.clone(),
            link: link_quality(cfg, &world.agents, world.target)?,
            reward: info.reward.total,
            collisions,
            sr: adjacency(&sr),
            weights: adjacency(&weights),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryStats {
    pub mse: f64,
    pub max_diff: f64,
    /// Number of `(t, n, m)` terms.
    pub terms: usize,
}

/// Lag-one anti-diagonal agreement over consecutive matrices of one episode:
/// terms `(M_t[n][m] - M_{t-1}[m][n])^2` for `t >= 1`, `n != m`.
pub fn symmetry_terms(matrices: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let mut terms = Vec::new();
    for t in 1..matrices.len() {
        let (now, prev) = (&matrices[t], &matrices[t - 1]);
        for n in 0..now.len() {
            for m in 0..now.len() {
                if n != m {
                    let d = now[n][m] - prev[m][n];
                    terms.push(d * d);
                }
            }
        }
    }
    terms
}

/// Pools [`symmetry_terms`] over several episodes.
pub fn symmetry_mse(episodes: &[Vec<Vec<Vec<f64>>>]) -> SymmetryStats {
    let mut sum = 0.0;
    let mut max_sq: f64 = 0.0;
    let mut terms = 0;
    for ep in episodes {
        for sq in symmetry_terms(ep) {
            sum += sq;
            max_sq = max_sq.max(sq);
            terms += 1;
        }
    }
    SymmetryStats {
        mse: if terms == 0 { 0.0 } else { sum / terms as f64 },
        max_diff: max_sq.sqrt(),
        terms,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub slots: usize,
    pub collisions: usize,
    pub mean_reward: f64,
    /// Over slots with a finite minimum latency, s.
    pub mean_latency: Option<f64>,
    pub max_latency: Option<f64>,
    /// Slots where even the longest admissible transmission misses the
    /// target error.
    pub saturated_slots: usize,
    pub fraction_meeting_requirement: f64,
    pub symmetry: SymmetryStats,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub records: Vec<MetricsRecord>,
    pub summary: EvalSummary,
}

/// Rollouts of `team` with exploration `epsilon` (0 for greedy), seeded by
/// `seed`.
pub fn evaluate_team(
    cfg: &Config,
    team: &Team,
    episodes: usize,
    seed: u64,
    epsilon: f64,
) -> Result<EvalOutcome> {
    let mut env = UavEnv::new(cfg.env()?)?;
    let mut env_rng = stream(seed, STREAM_EVAL_ENV);
    let mut action_rng = stream(seed, STREAM_EVAL_ACTIONS);
    let mut records = Vec::new();
    let mut matrices = Vec::with_capacity(episodes);
    let mut total_reward = 0.0;
    for e in 0..episodes {
        let ro = rollout(&mut env, team, epsilon, env_rng.gen(), &mut action_rng)?;
        total_reward += ro.episode.total_reward();
        let recs = records_from_rollout(cfg, e, &ro)?;
        matrices.push(recs.iter().map(|r| r.sr.clone()).collect::<Vec<_>>());
        records.extend(recs);
    }
    let latencies: Vec<f64> = records.iter().filter_map(|r| r.link.min_latency).collect();
    let summary = EvalSummary {
        episodes,
        slots: records.len(),
        collisions: records.iter().map(|r| r.collisions.len()).sum(),
        mean_reward: total_reward / episodes.max(1) as f64,
        mean_latency: (!latencies.is_empty())
            .then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        max_latency: latencies.iter().copied().reduce(f64::max),
        saturated_slots: records.len() - latencies.len(),
        fraction_meeting_requirement: if records.is_empty() {
            0.0
        } else {
            records.iter().filter(|r| r.link.meets_requirement).count() as f64
                / records.len() as f64
        },
        symmetry: symmetry_mse(&matrices),
    };
    Ok(EvalOutcome { records, summary })
}

/// Greedy evaluation of a checkpoint; the manifest must match `cfg`.
pub fn run_eval(
    cfg: &Config,
    checkpoint: &Checkpoint,
    episodes: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let mut rng = stream(cfg.seed, 0);
    let mut team = Team::new(&cfg.actor()?, &mut rng)?;
    checkpoint.restore_actors(cfg, &mut team)?;
    evaluate_team(cfg, &team, episodes, seed, 0.0)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_else(|| "inf".into())
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = records.first().map(|r| r.agents.len()).unwrap_or(0);
    let mut header = vec!["episode".to_string(), "slot".to_string()];
    for a in 0..n {
        header.extend([
            format!("agent{a}_x"),
            format!("agent{a}_y"),
            format!("agent{a}_dist_m"),
        ]);
    }
    header.extend(
        [
            "target_x",
            "target_y",
            "serving_agent",
            "serving_distance_m",
            "snr_db",
            "error_rate",
            "min_latency_s",
            "meets_requirement",
            "reward",
            "collisions",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.episode.to_string(), r.slot.to_string()];
        for a in 0..n {
            row.extend([
                fmt(r.agents[a][0]),
                fmt(r.agents[a][1]),
                fmt(r.dist_to_target[a]),
            ]);
        }
        row.extend([
            fmt(r.target[0]),
            fmt(r.target[1]),
            r.link.serving_agent.to_string(),
            fmt(r.link.serving_distance),
            fmt(r.link.snr_db),
            fmt(r.link.error_rate),
            opt(r.link.min_latency),
            r.link.meets_requirement.to_string(),
            fmt(r.reward),
            r.collisions.len().to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format adjacency matrices: one row per slot and ordered pair.
pub fn write_attention_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["episode", "slot", "from", "to", "sr", "weight"])?;
    for r in records {
        for (a, row) in r.sr.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                w.write_record([
                    r.episode.to_string(),
                    r.slot.to_string(),
                    a.to_string(),
                    b.to_string(),
                    fmt(v),
                    fmt(r.weights[a][b]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `attention.csv` back into per-episode `sr` matrices.
pub fn read_attention_csv(path: &Path) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    #[derive(Deserialize)]
    struct Row {
        episode: usize,
        slot: usize,
        from: usize,
        to: usize,
        sr: f64,
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut episodes: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row?;
        let size = row.from.max(row.to) + 1;
        if episodes.len() <= row.episode {
            episodes.resize(row.episode + 1, Vec::new());
        }
        let ep = &mut episodes[row.episode];
        if ep.len() < row.slot {
            ep.resize(row.slot, Vec::new());
        }
        let m = &mut ep[row.slot - 1];
        if m.len() < size {
            m.resize(size, Vec::new());
        }
        for line in m.iter_mut() {
            if line.len() < size {
                line.resize(size, 0.0);
            }
        }
        m[row.from][row.to] = row.sr;
    }
    Ok(episodes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub d_m: f64,
    pub latency_s: f64,
    pub error_rate: f64,
}

/// Error-rate surface over distance and transmission time, with the
/// `(urllc_range, target_latency)` operating point included.
pub fn channel_table(
    cfg: &Config,
    distances: &[f64],
    latencies: &[f64],
) -> Result<Vec<ChannelRow>> {
    let p: ChannelParams = cfg.channel();
    let mut ds = distances.to_vec();
    ds.push(cfg.urllc_range);
    ds.sort_by(f64::total_cmp);
    ds.dedup();
    let mut ts = latencies.to_vec();
    ts.push(cfg.target_latency);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut rows = Vec::with_capacity(ds.len() * ts.len());
    for &d in &ds {
        let snr = channel::snr(d, p.altitude, &p)?;
        for &t in &ts {
            rows.push(ChannelRow {
                d_m: d,
                latency_s: t,
                error_rate: channel::error_rate(snr, t, &p)?,
            });
        }
    }
    Ok(rows)
}

pub fn default_channel_grid() -> (Vec<f64>, Vec<f64>) {
    let distances = (0..=48).map(|i| 500.0 * i as f64).collect();
    let latencies = [5.0, 10.0, 15.0, 20.0, 25.0, 28.8, 39.0, 50.0, 75.0, 100.0]
        .iter()
        .map(|us| us * 1e-6)
        .collect();
    (distances, latencies)
}

pub fn write_channel_csv(path: &Path, rows: &[ChannelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["d_m", "latency_s", "error_rate"])?;
    for r in rows {
        w.write_record([fmt(r.d_m), fmt(r.latency_s), fmt(r.error_rate)])?;
    }
    w.flush()?;
    Ok(())
}
