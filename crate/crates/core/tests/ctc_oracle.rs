//! CTC dynamic program against the brute-force path enumerator, plus
//! finite-difference checks of its custom backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicl_core::objectives::{ctc_brute_force, ctc_loss_tape, ctc_loss_value};
use sicl_tensor::{grad_check, CheckInput, Tape};

fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Vec<f64> {
    let mut lp = Vec::with_capacity(t * k);
    for _ in 0..t {
        let row: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        lp.extend(row.iter().map(|x| x - z));
    }
    lp
}

#[test]
fn dp_matches_brute_force_over_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut unrealizable = 0;
    for trial in 0..300 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(1..=3); // labels, blank is class v
        let k = v + 1;
        let target_len = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..target_len).map(|_| rng.gen_range(0..v)).collect();
        let lp = random_log_probs(&mut rng, t, k);
        let dp = ctc_loss_value(&lp, t, k, v, &target);
        let brute = ctc_brute_force(&lp, t, k, v, &target).unwrap();
        if dp.is_infinite() || brute.is_infinite() {
            assert_eq!(
                dp.is_infinite(),
                brute.is_infinite(),
                "trial {trial}: dp {dp} vs brute {brute} for target {target:?}"
            );
            unrealizable += 1;
        } else {
            assert!(
                (dp - brute).abs() < 1e-10,
                "trial {trial}: dp {dp} vs brute {brute} for T={t} target {target:?}"
            );
        }
    }
    // The draw ranges make both outcomes common; make sure we exercised them.
    assert!(unrealizable > 10, "too few unrealizable cases: {unrealizable}");
    assert!(unrealizable < 290, "too few realizable cases");
}

#[test]
fn gradient_matches_finite_differences_on_realizable_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 8 {
        let t = rng.gen_range(3..=6);
        let v = rng.gen_range(2..=3);
        let k = v + 1;
        let target: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..v)).collect();
        // Raw logits as the leaf: the tape applies log_softmax, so the check
        // covers the composed backward (softmax posterior minus occupancy).
        let logits: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        {
            let probe = {
                let mut tape = Tape::new();
                let l = tape.constant(logits.clone(), vec![t, k]);
                let lp = tape.log_softmax(l, 1);
                ctc_loss_tape(&mut tape, lp, v, &target).map(|id| tape.value(id)[0])
            };
            if probe.is_none() || probe.unwrap().is_infinite() {
                continue;
            }
        }
        let target_ref = target.clone();
        let err = grad_check(
            move |tape, ids| {
                let lp = tape.log_softmax(ids[0], 1);
                ctc_loss_tape(tape, lp, v, &target_ref).expect("realizable by construction")
            },
            &[CheckInput::new(logits, vec![t, k])],
            1e-5,
        );
        assert!(err < 1e-4, "CTC gradient rel err {err}");
        checked += 1;
    }
}

#[test]
fn unrealizable_target_on_tape_is_skipped_not_crashed() {
    let mut tape = Tape::new();
    let logits = tape.leaf(vec![0.0; 4], vec![2, 2], true);
    let lp = tape.log_softmax(logits, 1);
    // "aa" needs at least 3 frames.
    assert!(ctc_loss_tape(&mut tape, lp, 1, &[0, 0]).is_none());
}
