//! Tracker-to-robot assignment as a linear assignment problem.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::AgentState;
use crate::error::{Error, Result};
use crate::linalg::to_vec2;
use crate::tracker::KalmanTrack;

use super::coarse::CoarseModel;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// Track id to robot id.
    pub pairs: BTreeMap<u64, usize>,
    pub unassigned_robots: BTreeSet<usize>,
}

impl AssignmentResult {
    pub fn robot_for(&self, track: u64) -> Option<usize> {
        self.pairs.get(&track).copied()
    }

    pub fn track_of(&self, robot: usize) -> Option<u64> {
        self.pairs.iter().find(|(_, &r)| r == robot).map(|(&t, _)| t)
    }

    pub fn all_explore(robots: &[AgentState]) -> Self {
        Self { pairs: BTreeMap::new(), unassigned_robots: robots.iter().map(|r| r.id).collect() }
    }
}

/// Minimum-cost perfect matching of rows to columns of a square matrix.
/// Returns the column chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // Shortest augmenting paths with potentials, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            row_col[col_row[j] - 1] = j - 1;
        }
    }
    row_col
}

fn distance(robot: &AgentState, track: &KalmanTrack) -> f64 {
    (to_vec2(track.position().mean()) - robot.position()).norm()
}

fn solve(
    robots: &[AgentState],
    tracks: &[KalmanTrack],
    horizon: f64,
    strict: bool,
) -> Result<(AssignmentResult, Vec<u64>)> {
    let n = robots.len();
    let r = tracks.len();
    if r > n {
        return Err(Error::Capacity { tracks: r, robots: n });
    }
    let reach: Vec<CoarseModel> = robots
        .iter()
        .map(|a| CoarseModel::for_unicycle(&a.bounds, horizon))
        .collect::<Result<_>>()?;
    let dist: Vec<Vec<f64>> =
        tracks.iter().map(|t| robots.iter().map(|a| distance(a, t)).collect()).collect();
    let edge = |i: usize, j: usize| dist[i][j] <= reach[j].reach_radius;
    if strict {
        if let Some(i) = (0..r).find(|&i| !(0..n).any(|j| edge(i, j))) {
            return Err(Error::InfeasibleAssignment(format!(
                "track {} is not reachable by any robot within the horizon",
                tracks[i].id
            )));
        }
    }
    let scale = dist.iter().flatten().fold(1.0f64, |m, &d| m.max(d));
    let big = 1e3 * scale * (n as f64 + 1.0);
    // Rows: tracks followed by n - r zero-cost dummy rows for explorers.
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..r {
        for j in 0..n {
            cost[i][j] = if edge(i, j) { dist[i][j] } else { big + dist[i][j] };
        }
    }
    let cols = hungarian(&cost);
    let mut out = AssignmentResult::default();
    let mut unreachable = Vec::new();
    for (i, &j) in cols.iter().enumerate() {
        if i < r {
            if !edge(i, j) {
                if strict {
                    return Err(Error::InfeasibleAssignment(format!(
                        "no assignment reaches every track; track {} is left without a robot",
                        tracks[i].id
                    )));
                }
                unreachable.push(tracks[i].id);
            }
            out.pairs.insert(tracks[i].id, robots[j].id);
        } else {
            out.unassigned_robots.insert(robots[j].id);
        }
    }
    Ok((out, unreachable))
}

/// Minimum total distance assignment of every track to a distinct robot
/// that can reach its predicted position within the horizon.
///
/// `tracks` must already be predicted to the horizon.
pub fn solve_assignment(
    robots: &[AgentState],
    tracks: &[KalmanTrack],
    horizon: f64,
) -> Result<AssignmentResult> {
    solve(robots, tracks, horizon, true).map(|(a, _)| a)
}

/// Like [`solve_assignment`] but admits out-of-reach pairs at a large
/// penalty; returns the tracks whose robot cannot reach them.
pub fn solve_assignment_relaxed(
    robots: &[AgentState],
    tracks: &[KalmanTrack],
    horizon: f64,
) -> Result<(AssignmentResult, Vec<u64>)> {
    solve(robots, tracks, horizon, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{ControlBounds, UnicycleState};
    use crate::tracker::LtiModel;
    use nalgebra::{DMatrix, DVector};

    fn robot(id: usize, x: f64, y: f64, reach: f64, horizon: f64) -> AgentState {
        let v = reach / (0.9 * horizon);
        AgentState::new(id, UnicycleState::new(x, y, 0.0), ControlBounds::new(v, 2.0).unwrap())
    }

    fn track(id: u64, x: f64, y: f64) -> KalmanTrack {
        KalmanTrack::new(
            id,
            DVector::from_column_slice(&[x, y, 0.0, 0.0]),
            DMatrix::identity(4, 4) * 0.01,
            LtiModel::default_planar(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn hungarian_small_known() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn single_reachable_pair() {
        let a = solve_assignment(&[robot(0, 0.0, 0.0, 3.0, 2.0)], &[track(1, 1.0, 0.0)], 2.0).unwrap();
        assert_eq!(a.robot_for(1), Some(0));
        assert!(a.unassigned_robots.is_empty());
    }

    #[test]
    fn three_robots_two_tracks() {
        let robots = [robot(0, 0.0, 0.0, 3.0, 2.0), robot(1, 5.0, 0.0, 3.0, 2.0), robot(2, 10.0, 0.0, 3.0, 2.0)];
        let a = solve_assignment(&robots, &[track(1, 0.0, 1.0), track(2, 10.0, 1.0)], 2.0).unwrap();
        assert_eq!(a.robot_for(1), Some(0));
        assert_eq!(a.robot_for(2), Some(2));
        assert_eq!(a.unassigned_robots, [1].into_iter().collect());
    }

    #[test]
    fn unreachable_track_is_infeasible() {
        let robots = [robot(0, 0.0, 0.0, 3.0, 2.0), robot(1, 1.0, 0.0, 3.0, 2.0)];
        let r = solve_assignment(&robots, &[track(1, 100.0, 100.0)], 2.0);
        assert!(matches!(r, Err(Error::InfeasibleAssignment(_))));
        let (a, bad) = solve_assignment_relaxed(&robots, &[track(1, 100.0, 100.0)], 2.0).unwrap();
        assert_eq!(bad, vec![1]);
        assert_eq!(a.robot_for(1), Some(1));
    }

    #[test]
    fn competing_tracks_infeasible() {
        let robots = [robot(0, 0.0, 0.0, 3.0, 2.0), robot(1, 50.0, 0.0, 3.0, 2.0)];
        let r = solve_assignment(&robots, &[track(1, 0.5, 0.0), track(2, -0.5, 0.0)], 2.0);
        assert!(matches!(r, Err(Error::InfeasibleAssignment(_))));
    }

    #[test]
    fn more_tracks_than_robots_is_capacity_error() {
        let r = solve_assignment(&[robot(0, 0.0, 0.0, 3.0, 2.0)], &[track(1, 0.0, 0.0), track(2, 0.0, 0.0)], 2.0);
        assert!(matches!(r, Err(Error::Capacity { tracks: 2, robots: 1 })));
    }
}
