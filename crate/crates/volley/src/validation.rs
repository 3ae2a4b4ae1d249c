//! Result comparison and quorum selection, plus the consecutive-valid
//! statistics that drive adaptive replication.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AppVersionId, HostId, InstanceId};

/// Opaque result payload: a vector of result scalars. Two digests are
/// compared only through [`equivalent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(pub Vec<f64>);

/// How two digests are declared equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Comparator {
    Bitwise,
    Fuzzy { tolerance: f64 },
}

impl Default for Comparator {
    fn default() -> Self {
        Comparator::Bitwise
    }
}

/// Componentwise digest equivalence. Mismatched lengths are never
/// equivalent; fuzzy mode bounds the relative difference of each component.
pub fn equivalent(a: &Digest, b: &Digest, c: Comparator) -> bool {
    if a.0.len() != b.0.len() {
        return false;
    }
    match c {
        Comparator::Bitwise => a
            .0
            .iter()
            .zip(&b.0)
            .all(|(x, y)| x.to_bits() == y.to_bits()),
        Comparator::Fuzzy { tolerance } => a.0.iter().zip(&b.0).all(|(x, y)| {
            let diff = (x - y).abs();
            diff <= tolerance * x.abs().max(y.abs())
        }),
    }
}

/// Outcome of a quorum check over the reported successes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuorumDecision {
    /// Lowest instance id of the winning group, if a strict majority exists.
    pub canonical: Option<InstanceId>,
    /// Members of the winning group (canonical included).
    pub valid: Vec<InstanceId>,
    /// Successes outside the winning group.
    pub invalid: Vec<InstanceId>,
}

/// Group successes by transitive closure under [`equivalent`] (single-link:
/// fuzzy equality is not transitive, so closure is the declared rule) and
/// pick a canonical result if one group holds a strict majority.
pub fn check_quorum(
    successes: &[(InstanceId, &Digest)],
    c: Comparator,
    min_quorum: u32,
) -> QuorumDecision {
    debug_assert!(successes.len() >= min_quorum as usize);
    let n = successes.len();
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut at = i;
        while parent[at] != root {
            let next = parent[at];
            parent[at] = root;
            at = next;
        }
        root
    }

    for i in 0..n {
        for j in (i + 1)..n {
            if equivalent(successes[i].1, successes[j].1, c) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }

    // Strict majority of all reported successes. At most one group can
    // satisfy it, so there is no tie to break.
    let winner = groups.values().find(|members| members.len() * 2 > n);
    match winner {
        Some(members) => {
            let mut valid: Vec<InstanceId> =
                members.iter().map(|&i| successes[i].0).collect();
            valid.sort_unstable();
            let invalid: Vec<InstanceId> = {
                let mut v: Vec<InstanceId> = (0..n)
                    .filter(|i| !members.contains(i))
                    .map(|i| successes[i].0)
                    .collect();
                v.sort_unstable();
                v
            };
            QuorumDecision { canonical: Some(valid[0]), valid, invalid }
        }
        None => QuorumDecision { canonical: None, valid: vec![], invalid: vec![] },
    }
}

/// Consecutive replication-validated result counts per (host, app version).
/// The counter feeds the adaptive replication rule; any invalid result
/// resets the pair to untrusted.
#[derive(Debug, Clone, Default)]
pub struct ReplicationStats {
    counts: BTreeMap<(HostId, AppVersionId), u64>,
}

impl ReplicationStats {
    pub fn consecutive_valid(&self, host: HostId, version: AppVersionId) -> u64 {
        self.counts.get(&(host, version)).copied().unwrap_or(0)
    }

    pub fn record_validation(&mut self, host: HostId, version: AppVersionId, valid: bool) {
        let entry = self.counts.entry((host, version)).or_insert(0);
        if valid {
            *entry += 1;
        } else {
            *entry = 0;
        }
    }
}

/// Adaptive replication rule: always replicate while the pair's streak N is
/// at most K, afterwards with probability K/N so replication decays toward
/// zero for long-trusted pairs.
pub fn should_replicate(
    stats: &ReplicationStats,
    host: HostId,
    version: AppVersionId,
    k: u64,
    rng: &mut impl Rng,
) -> bool {
    let n = stats.consecutive_valid(host, version);
    if n <= k {
        return true;
    }
    rng.random::<f64>() < k as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(vals: &[f64]) -> Digest {
        Digest(vals.to_vec())
    }

    #[test]
    fn fuzzy_identity_and_tolerance() {
        let tol6 = Comparator::Fuzzy { tolerance: 1e-6 };
        let tol8 = Comparator::Fuzzy { tolerance: 1e-8 };
        assert!(equivalent(&d(&[1.0]), &d(&[1.0]), tol6));
        assert!(equivalent(&d(&[1.0]), &d(&[1.0000005]), tol6));
        assert!(!equivalent(&d(&[1.0]), &d(&[1.0000005]), tol8));
    }

    #[test]
    fn bitwise_is_exact() {
        assert!(!equivalent(&d(&[1.0]), &d(&[1.1]), Comparator::Bitwise));
        assert!(equivalent(&d(&[1.0, 2.0]), &d(&[1.0, 2.0]), Comparator::Bitwise));
        assert!(!equivalent(&d(&[1.0]), &d(&[1.0, 1.0]), Comparator::Bitwise));
    }

    #[test]
    fn unanimous_pair_picks_lower_id() {
        let x1 = d(&[3.5]);
        let x2 = d(&[3.5]);
        let successes = vec![(InstanceId(7), &x2), (InstanceId(3), &x1)];
        let out = check_quorum(&successes, Comparator::Bitwise, 2);
        assert_eq!(out.canonical, Some(InstanceId(3)));
        assert_eq!(out.valid, vec![InstanceId(3), InstanceId(7)]);
        assert!(out.invalid.is_empty());
    }

    #[test]
    fn two_of_three_is_majority() {
        let x1 = d(&[1.0]);
        let y = d(&[9.0]);
        let x2 = d(&[1.0]);
        let successes = vec![
            (InstanceId(1), &x1),
            (InstanceId(2), &y),
            (InstanceId(3), &x2),
        ];
        let out = check_quorum(&successes, Comparator::Bitwise, 2);
        assert_eq!(out.canonical, Some(InstanceId(1)));
        assert_eq!(out.valid, vec![InstanceId(1), InstanceId(3)]);
        assert_eq!(out.invalid, vec![InstanceId(2)]);
    }

    #[test]
    fn split_pair_has_no_majority() {
        let x = d(&[1.0]);
        let y = d(&[2.0]);
        let successes = vec![(InstanceId(1), &x), (InstanceId(2), &y)];
        let out = check_quorum(&successes, Comparator::Bitwise, 2);
        assert_eq!(out.canonical, None);
    }

    #[test]
    fn replication_always_below_threshold() {
        let stats = ReplicationStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(should_replicate(&stats, HostId(1), AppVersionId(1), 10, &mut rng));
        }
    }

    #[test]
    fn replication_always_at_threshold() {
        let mut stats = ReplicationStats::default();
        for _ in 0..10 {
            stats.record_validation(HostId(1), AppVersionId(1), true);
        }
        assert_eq!(stats.consecutive_valid(HostId(1), AppVersionId(1)), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!(should_replicate(&stats, HostId(1), AppVersionId(1), 10, &mut rng));
        }
    }

    #[test]
    fn replication_rate_tracks_k_over_n() {
        let mut stats = ReplicationStats::default();
        for _ in 0..100 {
            stats.record_validation(HostId(1), AppVersionId(1), true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut replicated = 0u32;
        for _ in 0..draws {
            if should_replicate(&stats, HostId(1), AppVersionId(1), 10, &mut rng) {
                replicated += 1;
            }
        }
        // p = 0.1, sigma = sqrt(p(1-p)/n) ~ 0.003; allow 3 sigma.
        let rate = replicated as f64 / draws as f64;
        assert!((rate - 0.1).abs() < 0.009, "rate {rate}");
    }

    #[test]
    fn streak_resets_on_invalid() {
        let mut stats = ReplicationStats::default();
        for _ in 0..5 {
            stats.record_validation(HostId(2), AppVersionId(1), true);
        }
        assert_eq!(stats.consecutive_valid(HostId(2), AppVersionId(1)), 5);
        stats.record_validation(HostId(2), AppVersionId(1), true);
        assert_eq!(stats.consecutive_valid(HostId(2), AppVersionId(1)), 6);
        stats.record_validation(HostId(2), AppVersionId(1), false);
        assert_eq!(stats.consecutive_valid(HostId(2), AppVersionId(1)), 0);
        stats.record_validation(HostId(2), AppVersionId(1), true);
        assert_eq!(stats.consecutive_valid(HostId(2), AppVersionId(1)), 1);
    }

    // Brute-force closure: repeatedly merge any two groups containing an
    // equivalent pair until no merge applies.
    fn closure_groups(digests: &[Digest], c: Comparator) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = (0..digests.len()).map(|i| vec![i]).collect();
        loop {
            let mut merged = false;
            'outer: for a in 0..groups.len() {
                for b in (a + 1)..groups.len() {
                    let touch = groups[a].iter().any(|&i| {
                        groups[b]
                            .iter()
                            .any(|&j| equivalent(&digests[i], &digests[j], c))
                    });
                    if touch {
                        let tail = groups.remove(b);
                        groups[a].extend(tail);
                        merged = true;
                        break 'outer;
                    }
                }
            }
            if !merged {
                return groups;
            }
        }
    }

    proptest! {
        #[test]
        fn quorum_is_permutation_stable(
            values in proptest::collection::vec(0u8..4, 2..7),
            swap_a in 0usize..6,
            swap_b in 0usize..6,
        ) {
            let digests: Vec<Digest> = values.iter().map(|&v| d(&[v as f64])).collect();
            let base: Vec<(InstanceId, &Digest)> = digests
                .iter()
                .enumerate()
                .map(|(i, dg)| (InstanceId(i as u64), dg))
                .collect();
            let mut shuffled = base.clone();
            let n = shuffled.len();
            shuffled.swap(swap_a % n, swap_b % n);
            let a = check_quorum(&base, Comparator::Bitwise, 1);
            let b = check_quorum(&shuffled, Comparator::Bitwise, 1);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn grouping_matches_transitive_closure(
            values in proptest::collection::vec(0.0f64..4.0, 2..7),
            fuzzy in proptest::bool::ANY,
        ) {
            let digests: Vec<Digest> = values.iter().map(|&v| d(&[v])).collect();
            let c = if fuzzy {
                Comparator::Fuzzy { tolerance: 0.2 }
            } else {
                Comparator::Bitwise
            };
            let successes: Vec<(InstanceId, &Digest)> = digests
                .iter()
                .enumerate()
                .map(|(i, dg)| (InstanceId(i as u64), dg))
                .collect();
            let out = check_quorum(&successes, c, 1);
            let groups = closure_groups(&digests, c);
            let n = digests.len();
            let brute_winner = groups.iter().find(|g| g.len() * 2 > n);
            match brute_winner {
                Some(g) => {
                    let want = InstanceId(*g.iter().min().unwrap() as u64);
                    prop_assert_eq!(out.canonical, Some(want));
                    prop_assert_eq!(out.valid.len(), g.len());
                }
                None => prop_assert_eq!(out.canonical, None),
            }
        }
    }
}
