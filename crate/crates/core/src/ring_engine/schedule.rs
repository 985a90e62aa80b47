use crate::error::{Error, Result};
use crate::faults::Faults;

/// Owner of the text shard that worker `worker_id` processes in (1-indexed) `round`:
/// `(worker_id + round - 1) mod n`.
pub fn ring_schedule(worker_id: usize, round: usize, n: usize) -> Result<usize> {
    schedule_with(Faults::NONE, worker_id, round, n)
}

pub(crate) fn schedule_with(faults: Faults, worker_id: usize, round: usize, n: usize) -> Result<usize> {
    if n == 0 || worker_id >= n || round == 0 || round > n {
        return Err(Error::Argument(format!(
            "ring_schedule(worker {worker_id}, round {round}, n {n}) outside 0 <= worker < n, 1 <= round <= n"
        )));
    }
    let shift = if faults.schedule_off_by_one { round } else { round - 1 };
    Ok((worker_id + shift) % n)
}

/// Worker that receives what `worker` sends.
pub fn predecessor(worker: usize, n: usize) -> usize {
    (worker + n - 1) % n
}

/// Worker whose messages `worker` receives.
pub fn successor(worker: usize, n: usize) -> usize {
    (worker + 1) % n
}

/// Exhaustively checks the schedule for an `n`-worker ring: each worker meets every text
/// shard exactly once, the schedule agrees with where the rotating shards physically are,
/// and every gradient cache collects one contribution per worker before returning home.
pub fn check_schedule(n: usize, faults: Faults) -> Result<(), String> {
    let fail = |e: Error| e.to_string();
    let mut pairs = vec![vec![0u32; n]; n];
    // holding[w] = shard currently in worker w's memory; the cache travels with it
    let mut holding: Vec<usize> = (0..n).collect();
    let mut contributions = vec![vec![0u32; n]; n];
    for round in 1..=n {
        for (w, &held) in holding.iter().enumerate() {
            let k = schedule_with(faults, w, round, n).map_err(fail)?;
            if k != held {
                return Err(format!(
                    "n={n}: worker {w} in round {round} is scheduled on shard {k} but holds shard {held}"
                ));
            }
            pairs[w][k] += 1;
            contributions[held][w] += 1;
        }
        holding = (0..n).map(|w| holding[successor(w, n)]).collect();
    }
    for (w, row) in pairs.iter().enumerate() {
        if let Some(k) = row.iter().position(|&c| c != 1) {
            return Err(format!("n={n}: pair (image {w}, text {k}) visited {} times", row[k]));
        }
    }
    for (w, &held) in holding.iter().enumerate() {
        if held != w {
            return Err(format!("n={n}: worker {w} ends holding the gradient cache of shard {held}"));
        }
    }
    for (s, row) in contributions.iter().enumerate() {
        if row.iter().any(|&c| c != 1) {
            return Err(format!("n={n}: cache of shard {s} received contributions {row:?}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(ring_schedule(0, 1, 4).unwrap(), 0);
        assert_eq!(ring_schedule(2, 3, 4).unwrap(), 0);
        assert_eq!(ring_schedule(3, 4, 4).unwrap(), 2);
    }

    #[test]
    fn out_of_range_arguments() {
        for (w, r, n) in [(4, 1, 4), (0, 0, 4), (0, 5, 4), (0, 1, 0)] {
            assert!(matches!(ring_schedule(w, r, n), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn exhaustive_up_to_sixteen() {
        for n in 1..=16 {
            check_schedule(n, Faults::NONE).unwrap();
        }
    }

    #[test]
    fn off_by_one_is_caught() {
        let faults = Faults {
            schedule_off_by_one: true,
            ..Faults::NONE
        };
        for n in 2..=16 {
            assert!(check_schedule(n, faults).is_err());
        }
    }
}
