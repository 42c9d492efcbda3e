mod common;

use common::*;
use wmapf_core::framework::{run_episode, Limits, Outcome, SsCbsGenerator};
use wmapf_core::oracle::{brute_force_best_step, joint_lrta_reference, joint_optimal_cost};
use wmapf_core::sscbs::{plan_step, AgentPriorities, SsCbsOptions};
use wmapf_core::Configuration;

#[test]
fn plan_step_matches_brute_force() {
    for seed in 0..300 {
        let c = random_case(seed);
        let inst = &c.instance;
        let want = brute_force_best_step(&inst.map, &inst.tasks, &c.current, &c.store, &c.fields).unwrap();
        let got = plan_step(&inst.map, &inst.tasks, &c.current, &c.store, &c.fields, &AgentPriorities::none(inst.num_agents()), &SsCbsOptions::default());
        match (want, got) {
            (Some((v, _)), Ok(r)) => {
                assert_eq!(r.value, v, "seed {seed}");
                // the returned step is a valid minimiser, not just the right number
                let c_next = wmapf_core::model::joint_cost(&c.current, &r.next, &inst.tasks);
                let h_next = wmapf_core::heuristics::evaluate_h(&r.next, &c.fields, &c.store).unwrap();
                assert_eq!(c_next + h_next, v, "seed {seed}");
                assert!(wmapf_core::model::valid_joint_transition(&c.current, &r.next, &inst.map).unwrap());
            }
            (None, Err(_)) => {}
            (w, g) => panic!("seed {seed}: oracle {w:?} vs sscbs {g:?}"),
        }
    }
}

#[test]
fn pocket_swap_sscbs_is_optimal() {
    let f = pocket_swap();
    let inst = &f.instance;
    let cur = inst.starts();
    let r = plan_step(&inst.map, &inst.tasks, &cur, &f.store, &f.fields, &AgentPriorities::none(2), &SsCbsOptions::default()).unwrap();
    assert_eq!(r.next, Configuration::new(vec![POCKET_B, POCKET_D]));
    assert_eq!(r.h, 5);
    assert_eq!(r.value, 7);
    let (v, best) = brute_force_best_step(&inst.map, &inst.tasks, &cur, &f.store, &f.fields).unwrap().unwrap();
    assert_eq!(v, 7);
    assert_eq!(best, r.next);
}

#[test]
fn pocket_swap_naive_variants_are_wrong() {
    let f = pocket_swap();
    let inst = &f.instance;
    let cur = inst.starts();
    let (hl, h_hl) = naive_high_level_step(&inst.map, &inst.tasks, &cur, &f.store, &f.fields);
    assert_eq!(hl, Configuration::new(vec![POCKET_B, POCKET_C]));
    assert_eq!(h_hl, 54);
    let (ll, h_ll) = naive_low_level_step(&inst.map, &inst.tasks, &cur, &f.store, &f.fields, &[1, 0]);
    assert_eq!(ll, Configuration::new(vec![POCKET_A, POCKET_C]));
    assert_eq!(h_ll, 25);
}

#[test]
fn pocket_swap_episode_cost_is_at_least_joint_optimum() {
    let f = pocket_swap();
    let inst = &f.instance;
    let opt = joint_optimal_cost(inst, &f.fields).unwrap().unwrap();
    let mut ag = SsCbsGenerator::new(inst, &f.fields, AgentPriorities::none(2), 1.0);
    let (r, _) = run_episode(inst, &f.fields, &mut ag, &Limits::default());
    assert_eq!(r.outcome, Outcome::Solved);
    assert!(r.cost >= opt);
}

#[test]
fn sscbs_and_joint_lrta_both_solve_pairs() {
    for seed in 0..40 {
        let c = random_case(10_000 + seed);
        if c.instance.num_agents() != 2 {
            continue;
        }
        let inst = &c.instance;
        let limits = Limits { record_trace: true, ..Limits::default() };
        let (bf, _) = joint_lrta_reference(inst, &c.fields, &limits);
        let mut ag = SsCbsGenerator::new(inst, &c.fields, AgentPriorities::none(2), 1.0);
        let (ss, _) = run_episode(inst, &c.fields, &mut ag, &limits);
        assert_eq!(bf.outcome, Outcome::Solved, "seed {seed}");
        assert_eq!(ss.outcome, Outcome::Solved, "seed {seed}");
    }
}
