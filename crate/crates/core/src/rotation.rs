//! Proposer selection: index rotation with a blocks-per-proposer bump, and the
//! weighted voting-power alternative.

use serde::{Deserialize, Serialize};

use crate::types::ValidatorId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerScheme {
    #[default]
    IndexRotation,
    WeightedPower,
}

/// Rotation state: the member list, how many heights a proposer keeps its
/// slot, and the previously chosen proposer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationState {
    pub members: Vec<ValidatorId>,
    pub blocks_per_proposer: u64,
    pub pre_proposer: Option<ValidatorId>,
}

impl RotationState {
    pub fn new(members: Vec<ValidatorId>, blocks_per_proposer: u64) -> Self {
        Self {
            members,
            blocks_per_proposer: blocks_per_proposer.max(1),
            pre_proposer: None,
        }
    }

    /// Picks the proposer of (`height`, `round`) and remembers it as the
    /// previous proposer.
    ///
    /// Panics on an empty member list.
    pub fn get_proposer(&mut self, height: u64, round: u64) -> ValidatorId {
        let size = self.members.len();
        assert!(size > 0, "proposer rotation over an empty validator set");
        let mut offset = self
            .pre_proposer
            .as_ref()
            .and_then(|p| self.members.iter().position(|m| m == p))
            .unwrap_or(0);
        if height.is_multiple_of(self.blocks_per_proposer) {
            offset += 1;
        }
        let round_offset = (round % size as u64) as usize;
        let chosen = self.members[(offset + round_offset) % size].clone();
        self.pre_proposer = Some(chosen.clone());
        chosen
    }
}

/// Proposer of (`height`, `round`) computed from a height's base state
/// without disturbing it.
pub fn proposer_at(base: &RotationState, height: u64, round: u64) -> ValidatorId {
    base.clone().get_proposer(height, round)
}

/// After electing `selected`, it pays the sum of the other validators' stakes
/// and every other validator gains its own stake. The total is conserved.
pub fn update_voting_power(powers: &mut [i64], stakes: &[u64], selected: usize) {
    let others: i64 = stakes
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != selected)
        .map(|(_, s)| *s as i64)
        .sum();
    for (i, p) in powers.iter_mut().enumerate() {
        if i == selected {
            *p -= others;
        } else {
            *p += stakes[i] as i64;
        }
    }
}

/// Index of the largest power; the lowest index wins ties.
pub fn elect_by_power(powers: &[i64]) -> usize {
    let mut best = 0;
    for (i, p) in powers.iter().enumerate() {
        if *p > powers[best] {
            best = i;
        }
    }
    best
}

/// Weighted election for `round` of a height whose base powers are `base`:
/// elect and update `round + 1` times, returning the last winner and the
/// powers after its update.
pub fn weighted_proposer(base: &[i64], stakes: &[u64], round: u64) -> (usize, Vec<i64>) {
    let mut powers = base.to_vec();
    let mut chosen = elect_by_power(&powers);
    update_voting_power(&mut powers, stakes, chosen);
    for _ in 0..round {
        chosen = elect_by_power(&powers);
        update_voting_power(&mut powers, stakes, chosen);
    }
    (chosen, powers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn members(n: usize) -> Vec<ValidatorId> {
        (0..n).map(ValidatorId::new).collect()
    }

    #[test]
    fn bump_on_block_boundary() {
        let mut st = RotationState::new(members(4), 1);
        assert_eq!(st.get_proposer(1, 0).index, 1);
        assert_eq!(st.pre_proposer.as_ref().unwrap().index, 1);
    }

    #[test]
    fn no_bump_inside_a_proposer_term() {
        let mut st = RotationState::new(members(4), 10);
        st.pre_proposer = Some(ValidatorId::new(1));
        assert_eq!(st.get_proposer(1, 2).index, 3);
    }

    #[test]
    fn single_member_always_chosen() {
        let mut st = RotationState::new(members(1), 3);
        for h in 1..10 {
            for r in 0..5 {
                assert_eq!(st.get_proposer(h, r).index, 0);
            }
        }
    }

    #[test]
    fn voting_power_update() {
        let mut powers = vec![1, 1, 1, 1];
        update_voting_power(&mut powers, &[1, 1, 1, 1], 0);
        assert_eq!(powers, vec![-2, 2, 2, 2]);
        assert_eq!(elect_by_power(&powers), 1);
        assert_eq!(elect_by_power(&[5, 5, 7]), 2);
        assert_eq!(elect_by_power(&[3, 3, 1]), 0);
    }

    #[test]
    fn weighted_rotation_follows_stake() {
        // Stakes 1:3 elect the heavy validator three times out of four.
        let stakes = [1u64, 3];
        let mut powers = vec![1i64, 3];
        let mut wins = [0usize; 2];
        for _ in 0..40 {
            let w = elect_by_power(&powers);
            wins[w] += 1;
            update_voting_power(&mut powers, &stakes, w);
        }
        assert_eq!(wins, [10, 30]);
        let (first, _) = weighted_proposer(&[1, 3], &stakes, 0);
        assert_eq!(first, 1);
    }

    proptest! {
        #[test]
        fn rounds_cover_every_member_once(n in 1usize..12, h in 1u64..50, b in 1u64..5, pre in proptest::option::of(0usize..12)) {
            let mut base = RotationState::new(members(n), b);
            base.pre_proposer = pre.filter(|p| *p < n).map(ValidatorId::new);
            let mut hits = vec![0usize; n];
            for r in 0..n as u64 {
                hits[proposer_at(&base, h, r).index] += 1;
            }
            prop_assert!(hits.iter().all(|&c| c == 1));
        }

        #[test]
        fn k_laps_elect_each_member_k_times(n in 1usize..10, k in 1u64..5, h in 1u64..30) {
            let base = RotationState::new(members(n), 1);
            let mut hits = vec![0u64; n];
            for r in 0..k * n as u64 {
                hits[proposer_at(&base, h, r).index] += 1;
            }
            prop_assert!(hits.iter().all(|&c| c == k));
        }

        #[test]
        fn power_update_conserves_total(stakes in proptest::collection::vec(1u64..100, 1..10), pick in 0usize..10) {
            let sel = pick % stakes.len();
            let mut powers: Vec<i64> = stakes.iter().map(|s| *s as i64).collect();
            let before: i64 = powers.iter().sum();
            update_voting_power(&mut powers, &stakes, sel);
            prop_assert_eq!(powers.iter().sum::<i64>(), before);
        }
    }
}
