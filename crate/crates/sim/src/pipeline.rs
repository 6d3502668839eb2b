//! Event-driven simulation of pipeline-parallel training schedules.
//!
//! Model chunks form a chain of `S * R` virtual stages; virtual stage `v`
//! lives on device `v % S` as chunk round `v / S`. With one round the devices
//! run fill-drain, otherwise a circular schedule driven by a ready queue.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    Fwd,
    Bwd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSpec {
    pub stages: usize,
    pub microbatches: usize,
    pub rounds: usize,
    pub t_f: f64,
    pub t_b: f64,
    pub latency: f64,
    /// Data-parallel work before and after the pipelined layers; every
    /// device is busy for its whole duration.
    pub prologue: f64,
    pub epilogue: f64,
    /// Pipeline replicas; scales throughput only.
    pub data_parallel: usize,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self::uniform(4, 8, 1)
    }
}

impl PipelineSpec {
    /// Unit forward and backward cost, no latency.
    pub fn uniform(stages: usize, microbatches: usize, rounds: usize) -> Self {
        Self { stages, microbatches, rounds, t_f: 1.0, t_b: 1.0, latency: 0.0, prologue: 0.0, epilogue: 0.0, data_parallel: 1 }
    }

    /// Sixteen stages with a four-round circular schedule.
    pub fn circular16(microbatches: usize) -> Self {
        Self { data_parallel: 64, ..Self::uniform(16, microbatches, 4) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.microbatches == 0 || self.rounds == 0 || self.data_parallel == 0 {
            return Err(SimError::Contract("stages, microbatches, rounds and data_parallel must be >= 1".into()));
        }
        for (name, v) in [("t_f", self.t_f), ("t_b", self.t_b), ("latency", self.latency), ("prologue", self.prologue), ("epilogue", self.epilogue)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn virtual_stages(&self) -> usize {
        self.stages * self.rounds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub stage: usize,
    pub chunk: usize,
    pub microbatch: usize,
    pub dir: Dir,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub devices: Vec<DeviceTrace>,
    pub makespan: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub prologue: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub epilogue: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl ScheduleTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SimError::Format(e.to_string()))
    }

    /// Sum of task durations plus the prologue and epilogue on every device.
    pub fn busy_time(&self) -> f64 {
        let tasks: f64 = self.devices.iter().flat_map(|d| &d.tasks).map(|t| t.end - t.start).sum();
        tasks + self.devices.len() as f64 * (self.prologue + self.epilogue)
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    v: usize,
    m: usize,
    dir: Dir,
}

/// Runs the schedule for `spec` and returns every task's placement.
pub fn simulate_pipeline(spec: &PipelineSpec) -> Result<ScheduleTrace> {
    spec.validate()?;
    let (s, m, vs) = (spec.stages, spec.microbatches, spec.virtual_stages());
    let id = |dir: Dir, v: usize, mb: usize| (if dir == Dir::Fwd { 0 } else { vs * m }) + v * m + mb;
    let n = 2 * vs * m;
    let mut nodes = Vec::with_capacity(n);
    for dir in [Dir::Fwd, Dir::Bwd] {
        for v in 0..vs {
            for mb in 0..m {
                nodes.push(Node { v, m: mb, dir });
            }
        }
    }
    let dep = |t: &Node| -> Option<usize> {
        match t.dir {
            Dir::Fwd => (t.v > 0).then(|| id(Dir::Fwd, t.v - 1, t.m)),
            Dir::Bwd if t.v + 1 == vs => Some(id(Dir::Fwd, t.v, t.m)),
            Dir::Bwd => Some(id(Dir::Bwd, t.v + 1, t.m)),
        }
    };
    let mut dependents = vec![Vec::new(); n];
    for (i, t) in nodes.iter().enumerate() {
        if let Some(d) = dep(t) {
            dependents[d].push(i);
        }
    }
    let device = |v: usize| v % s;
    let duration = |t: &Node| if t.dir == Dir::Fwd { spec.t_f } else { spec.t_b };

    // Per-device task lists; for fill-drain this is also the execution order.
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); s];
    for dir in [Dir::Fwd, Dir::Bwd] {
        for mb in 0..m {
            for v in 0..vs {
                queues[device(v)].push(id(dir, v, mb));
            }
        }
    }
    let fill_drain = spec.rounds == 1;
    let mut ready: Vec<Option<f64>> = nodes.iter().map(|t| dep(t).is_none().then_some(spec.prologue)).collect();
    let mut done = vec![false; n];
    let mut head = vec![0usize; s];
    let mut free = vec![spec.prologue; s];
    let mut placed: Vec<(usize, f64, f64)> = Vec::with_capacity(n);

    for _ in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for d in 0..s {
            let choice = if fill_drain {
                queues[d].get(head[d]).and_then(|&t| ready[t].map(|r| (free[d].max(r), t)))
            } else {
                let earliest = queues[d].iter().filter(|&&t| !done[t]).filter_map(|&t| ready[t]).min_by(f64::total_cmp);
                earliest.and_then(|r| {
                    let at = free[d].max(r);
                    queues[d]
                        .iter()
                        .copied()
                        .filter(|&t| !done[t] && ready[t].is_some_and(|x| x <= at))
                        .min_by_key(|&t| (nodes[t].dir, nodes[t].v / s, nodes[t].m))
                        .map(|t| (at, t))
                })
            };
            if let Some((at, t)) = choice {
                if best.is_none_or(|b| at < b.0) {
                    best = Some((at, d, t));
                }
            }
        }
        let (start, d, t) = best.ok_or_else(|| SimError::Contract("schedule deadlocked".into()))?;
        let end = start + duration(&nodes[t]);
        done[t] = true;
        head[d] += 1;
        free[d] = end;
        placed.push((t, start, end));
        for &next in &dependents[t] {
            let lat = if device(nodes[next].v) == d { 0.0 } else { spec.latency };
            ready[next] = Some(end + lat);
        }
    }

    let mut devices = vec![DeviceTrace::default(); s];
    let mut last = spec.prologue;
    for (t, start, end) in placed {
        let node = nodes[t];
        last = last.max(end);
        devices[device(node.v)].tasks.push(Task { stage: device(node.v), chunk: node.v / s, microbatch: node.m, dir: node.dir, start, end });
    }
    Ok(ScheduleTrace { devices, makespan: last + spec.epilogue, prologue: spec.prologue, epilogue: spec.epilogue })
}

/// Idle fraction of device time within the makespan.
pub fn bubble_ratio(trace: &ScheduleTrace) -> Result<f64> {
    if trace.devices.is_empty() || trace.devices.iter().all(|d| d.tasks.is_empty()) {
        return Err(SimError::Contract("empty trace".into()));
    }
    if trace.makespan == 0.0 {
        return Ok(0.0);
    }
    let total = trace.devices.len() as f64 * trace.makespan;
    Ok(((total - trace.busy_time()) / total).clamp(0.0, 1.0))
}

/// Checks that tasks on each device do not overlap and that every task starts
/// after its dependency ends (plus latency across devices).
pub fn validate_trace(spec: &PipelineSpec, trace: &ScheduleTrace) -> Result<()> {
    let (s, vs) = (spec.stages, spec.virtual_stages());
    let mut end_of = std::collections::HashMap::new();
    for d in &trace.devices {
        let mut sorted: Vec<&Task> = d.tasks.iter().collect();
        sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in sorted.windows(2) {
            if w[1].start < w[0].end {
                return Err(SimError::Contract(format!("overlap on stage {}", w[0].stage)));
            }
        }
        for t in &d.tasks {
            end_of.insert((t.chunk * s + t.stage, t.microbatch, t.dir), (t.end, t.stage));
        }
    }
    if end_of.len() != 2 * vs * spec.microbatches {
        return Err(SimError::Contract(format!("trace holds {} distinct tasks", end_of.len())));
    }
    for d in &trace.devices {
        for t in &d.tasks {
            let v = t.chunk * s + t.stage;
            let dep = match t.dir {
                Dir::Fwd if v == 0 => None,
                Dir::Fwd => Some((v - 1, t.microbatch, Dir::Fwd)),
                Dir::Bwd if v + 1 == vs => Some((v, t.microbatch, Dir::Fwd)),
                Dir::Bwd => Some((v + 1, t.microbatch, Dir::Bwd)),
            };
            if let Some(key) = dep {
                let (end, stage) = end_of[&key];
                let lat = if stage == t.stage { 0.0 } else { spec.latency };
                if t.start < end + lat {
                    return Err(SimError::Contract(format!("task {:?} on stage {} starts before its dependency", t.dir, t.stage)));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stages: usize,
    pub microbatches: usize,
    pub rounds: usize,
    pub t_f: f64,
    pub t_b: f64,
    pub latency: f64,
    pub makespan: f64,
    pub bubble_ratio: f64,
    /// Microbatches completed per time unit across all replicas.
    pub throughput: f64,
}

/// Simulates every spec; rows keep the input order in both modes.
pub fn sweep(specs: &[PipelineSpec], parallel: bool) -> Result<Vec<SweepRow>> {
    let row = |spec: &PipelineSpec| -> Result<SweepRow> {
        let trace = simulate_pipeline(spec)?;
        let throughput = if trace.makespan > 0.0 {
            (spec.data_parallel * spec.microbatches) as f64 / trace.makespan
        } else {
            f64::INFINITY
        };
        Ok(SweepRow {
            stages: spec.stages,
            microbatches: spec.microbatches,
            rounds: spec.rounds,
            t_f: spec.t_f,
            t_b: spec.t_b,
            latency: spec.latency,
            makespan: trace.makespan,
            bubble_ratio: bubble_ratio(&trace)?,
            throughput,
        })
    };
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return specs.par_iter().map(row).collect();
    }
    let _ = parallel;
    specs.iter().map(row).collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_stage_makespan() {
        let t = simulate_pipeline(&PipelineSpec::uniform(2, 2, 1)).unwrap();
        assert_eq!(t.makespan, 6.0);
        assert_eq!(bubble_ratio(&t).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn single_stage_has_no_bubble() {
        for m in 1..6 {
            for r in 1..4 {
                let t = simulate_pipeline(&PipelineSpec::uniform(1, m, r)).unwrap();
                assert_eq!(bubble_ratio(&t).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn four_by_eight() {
        let t = simulate_pipeline(&PipelineSpec::uniform(4, 8, 1)).unwrap();
        assert_eq!(bubble_ratio(&t).unwrap(), 3.0 / 11.0);
    }

    #[test]
    fn json_round_trip() {
        let spec = PipelineSpec { latency: 0.5, ..PipelineSpec::uniform(3, 4, 2) };
        let t = simulate_pipeline(&spec).unwrap();
        validate_trace(&spec, &t).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v.as_object().unwrap().keys().collect::<Vec<_>>(), vec!["devices", "makespan"]);
        assert_eq!(ScheduleTrace::from_json(&t.to_json()).unwrap(), t);
    }
}
