//! Scenario preprocessing into the focal frame and block-diagonal batches.
//!
//! The focal frame puts the focal agent's last observed position at the
//! origin and its heading along +x. Per-step features are
//! `(Δx, Δy, vx·dt, vy·dt)`: displacement since the previous step and the
//! velocity scaled to metres per step. An agent's first valid step, or the
//! first after a gap, uses `v·dt` for its displacement.

use camnet_autodiff::Tensor;
use camnet_core::graphs::Connectivity;
use camnet_core::scenario::{Scenario, DT, OBS_STEPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ModelError;

pub const OBS_DIM: usize = 4;

pub type Point = (f64, f64);

/// One scenario expressed in its focal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub station_ids: Vec<u32>,
    pub focal: usize,
    pub origin: Point,
    /// Cosine and sine of the focal heading.
    pub rot: (f64, f64),
    /// `[agent][step]` positions in the frame.
    pub pos: Vec<Vec<Point>>,
    pub feats: Vec<Vec<[f64; OBS_DIM]>>,
    pub valid: Vec<Vec<bool>>,
    pub steps: usize,
}

impl Scene {
    pub fn from_scenario(s: &Scenario) -> Result<Scene, ModelError> {
        s.check_structure().map_err(|e| ModelError::Data(format!("{}: {e}", s.id)))?;
        let focal = s.focal_index().ok_or_else(|| ModelError::Data(format!("{}: no focal agent", s.id)))?;
        let last = OBS_STEPS - 1;
        let fa = &s.agents[focal];
        if !fa.valid[last] {
            return Err(ModelError::Data(format!("{}: focal agent unobserved at the last step", s.id)));
        }
        let origin = fa.position(last);
        let yaw = fa.states[last][4];
        let rot = (yaw.cos(), yaw.sin());
        let steps = fa.states.len();
        let mut scene = Scene {
            id: s.id.clone(),
            station_ids: s.agents.iter().map(|a| a.station_id).collect(),
            focal,
            origin,
            rot,
            pos: Vec::new(),
            feats: Vec::new(),
            valid: Vec::new(),
            steps,
        };
        for a in &s.agents {
            let pos: Vec<Point> = a
                .states
                .iter()
                .zip(&a.valid)
                .map(|(st, v)| if *v { scene.to_frame((st[0], st[1])) } else { (0.0, 0.0) })
                .collect();
            let mut feats = Vec::with_capacity(steps);
            for k in 0..steps {
                if !a.valid[k] {
                    feats.push([0.0; OBS_DIM]);
                    continue;
                }
                let v = scene.rotate((a.states[k][2] * DT, a.states[k][3] * DT));
                let d = if k > 0 && a.valid[k - 1] {
                    (pos[k].0 - pos[k - 1].0, pos[k].1 - pos[k - 1].1)
                } else {
                    v
                };
                feats.push([d.0, d.1, v.0, v.1]);
            }
            scene.pos.push(pos);
            scene.feats.push(feats);
            scene.valid.push(a.valid.clone());
        }
        Ok(scene)
    }

    pub fn n_agents(&self) -> usize {
        self.station_ids.len()
    }

    /// World vector to frame vector.
    pub fn rotate(&self, v: Point) -> Point {
        let (c, s) = self.rot;
        (c * v.0 + s * v.1, -s * v.0 + c * v.1)
    }

    /// Frame vector to world vector.
    pub fn unrotate(&self, v: Point) -> Point {
        let (c, s) = self.rot;
        (c * v.0 - s * v.1, s * v.0 + c * v.1)
    }

    pub fn to_frame(&self, p: Point) -> Point {
        self.rotate((p.0 - self.origin.0, p.1 - self.origin.1))
    }

    pub fn to_world(&self, p: Point) -> Point {
        let w = self.unrotate(p);
        (w.0 + self.origin.0, w.1 + self.origin.1)
    }

    /// Position used to place agent `a` in the graph of step `t`: its
    /// previous position if known, else its current one.
    pub fn graph_position(&self, a: usize, t: usize) -> Point {
        if t > 0 && self.valid[a][t - 1] {
            self.pos[a][t - 1]
        } else {
            self.pos[a][t]
        }
    }
}

/// Edge lists of one step over the whole batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepGraph {
    pub n: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl StepGraph {
    /// Appends the adjacency of one group of rows starting at `offset`.
    pub fn extend(&mut self, conn: Connectivity, positions: &[Point], valid: &[bool], offset: usize) {
        let adj = conn.build(positions, valid);
        for (s, d) in adj.edges {
            self.src.push(s + offset);
            self.dst.push(d + offset);
        }
    }

    /// Restores the `(dst, src)` edge order after several groups were appended.
    pub fn finish(&mut self) {
        let mut e: Vec<(usize, usize)> = self.dst.iter().copied().zip(self.src.iter().copied()).collect();
        e.sort_unstable();
        self.dst = e.iter().map(|p| p.0).collect();
        self.src = e.iter().map(|p| p.1).collect();
    }
}

/// Teacher-forcing inputs for a set of scenes stacked block-diagonally.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    pub steps: usize,
    /// First row of every scene.
    pub offsets: Vec<usize>,
    /// `[N, 4]` per step.
    pub x: Vec<Tensor>,
    /// `[N, 1]` validity per step.
    pub mask: Vec<Tensor>,
    pub graphs: Vec<StepGraph>,
    /// Valid agent-steps.
    pub count: usize,
}

impl Batch {
    pub fn build(scenes: &[&Scene], conn: Connectivity) -> Batch {
        let n: usize = scenes.iter().map(|s| s.n_agents()).sum();
        let steps = scenes.iter().map(|s| s.steps).max().unwrap_or(0);
        let mut offsets = Vec::with_capacity(scenes.len());
        let mut off = 0;
        for s in scenes {
            offsets.push(off);
            off += s.n_agents();
        }
        let mut x = Vec::with_capacity(steps);
        let mut mask = Vec::with_capacity(steps);
        let mut graphs = Vec::with_capacity(steps);
        let mut count = 0;
        for t in 0..steps {
            let mut xd = Vec::with_capacity(n * OBS_DIM);
            let mut md = Vec::with_capacity(n);
            let mut g = StepGraph { n, ..Default::default() };
            for (s, &o) in scenes.iter().zip(&offsets) {
                let valid: Vec<bool> = (0..s.n_agents()).map(|a| s.valid[a][t]).collect();
                let positions: Vec<Point> = (0..s.n_agents()).map(|a| s.graph_position(a, t)).collect();
                for a in 0..s.n_agents() {
                    xd.extend_from_slice(&s.feats[a][t]);
                    md.push(if valid[a] { 1.0 } else { 0.0 });
                }
                count += valid.iter().filter(|v| **v).count();
                g.extend(conn, &positions, &valid, o);
            }
            g.finish();
            x.push(Tensor::new(vec![n, OBS_DIM], xd).expect("feature layout"));
            mask.push(Tensor::new(vec![n, 1], md).expect("mask layout"));
            graphs.push(g);
        }
        Batch { n, steps, offsets, x, mask, graphs, count }
    }

    /// First `steps` steps only.
    pub fn truncated(mut self, steps: usize) -> Batch {
        let steps = steps.min(self.steps);
        self.x.truncate(steps);
        self.mask.truncate(steps);
        self.graphs.truncate(steps);
        self.steps = steps;
        self.count = self.mask.iter().map(|m| m.data().iter().filter(|v| **v > 0.0).count()).sum();
        self
    }
}

/// 64-bit mixing step used to derive sub-seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and releases.
pub fn hash_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Standard-normal stream owned by one agent (and one rollout copy), so an
/// agent's noise does not depend on which other agents share its batch.
pub fn agent_noise(seed: u64, scene_id: &str, station_id: u32, copy: u32, len: usize) -> Vec<f64> {
    let s = mix(mix(mix(seed, hash_id(scene_id)), station_id as u64), copy as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Per-step `[N, d]` noise for a batch; rows follow the batch layout.
pub fn batch_noise(scenes: &[&Scene], seed: u64, steps: usize, d: usize) -> Vec<Tensor> {
    let streams: Vec<Vec<f64>> = scenes
        .iter()
        .flat_map(|s| s.station_ids.iter().map(move |&st| agent_noise(seed, &s.id, st, 0, steps * d)))
        .collect();
    let n = streams.len();
    (0..steps)
        .map(|t| {
            let mut data = Vec::with_capacity(n * d);
            for s in &streams {
                data.extend_from_slice(&s[t * d..(t + 1) * d]);
            }
            Tensor::new(vec![n, d], data).expect("noise layout")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use camnet_core::synth;

    #[test]
    fn focal_heading_points_along_x() {
        let s = synth::linear_scenario("a", 10.0, 2.0);
        let sc = Scene::from_scenario(&s).unwrap();
        let f = sc.feats[0][OBS_STEPS - 1];
        assert!((f[0] - 1.0).abs() < 1e-9 && f[1].abs() < 1e-9);
        assert!((f[2] - 1.0).abs() < 1e-12 && f[3].abs() < 1e-12);
        assert_eq!(sc.pos[0][OBS_STEPS - 1], (0.0, 0.0));
    }

    #[test]
    fn frame_round_trip() {
        let s = synth::curved_scenario("a", 8.0, -0.7, 0.1);
        let sc = Scene::from_scenario(&s).unwrap();
        for k in [0, 30, 109] {
            let w = sc.to_world(sc.pos[0][k]);
            let p = s.agents[0].position(k);
            assert!((w.0 - p.0).abs() < 1e-8 && (w.1 - p.1).abs() < 1e-8);
        }
    }

    #[test]
    fn gap_restarts_with_velocity() {
        let mut s = synth::linear_scenario("a", 10.0, 0.0);
        let mut b = s.agents[0].clone();
        b.focal = false;
        b.station_id = 9;
        b.valid[20] = false;
        b.states[20] = [0.0; 5];
        b.speed.as_mut().unwrap()[20] = 0.0;
        s.agents.push(b);
        let sc = Scene::from_scenario(&s).unwrap();
        assert_eq!(sc.feats[1][20], [0.0; 4]);
        assert_eq!(sc.feats[1][21][0], sc.feats[1][21][2]);
    }

    #[test]
    fn batch_is_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Scene::from_scenario(&synth::random_scenario("a", &mut rng, 3)).unwrap();
        let b = Scene::from_scenario(&synth::random_scenario("b", &mut rng, 3)).unwrap();
        let batch = Batch::build(&[&a, &b], Connectivity::AllToAll);
        let na = a.n_agents();
        for g in &batch.graphs {
            for (s, d) in g.src.iter().zip(&g.dst) {
                assert_eq!(*s < na, *d < na);
            }
        }
        assert_eq!(batch.n, na + b.n_agents());
    }

    #[test]
    fn noise_is_keyed_by_agent() {
        let x = agent_noise(1, "s", 5, 0, 8);
        assert_eq!(x, agent_noise(1, "s", 5, 0, 8));
        assert_ne!(x, agent_noise(1, "s", 6, 0, 8));
        assert_ne!(x, agent_noise(1, "s", 5, 1, 8));
        assert_ne!(x, agent_noise(2, "s", 5, 0, 8));
    }
}
