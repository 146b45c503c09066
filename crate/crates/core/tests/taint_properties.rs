use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safe_core::labels::{LabelHandle, LabelStore};
use safe_core::taint_vm::corpus::{generate, CorpusConfig, CorpusHost, SOURCES};
use safe_core::taint_vm::{
    analyze_implicit_flows, annotate_all, execute, execute_untracked, execute_with, label_view, ExecConfig,
    Observer, SiteId, Value,
};

#[derive(Default)]
struct Checks {
    failures: Vec<String>,
}

impl Observer for Checks {
    fn exited(&mut self, site: SiteId, guard: LabelHandle, write_set: &[(String, LabelHandle)], labels: &LabelStore) {
        for (var, tag) in write_set {
            if !labels.get(*tag).covers(labels.get(guard)) {
                self.failures.push(format!("{site}: {var} lost the guard label"));
            }
        }
    }

    fn assigned(&mut self, var: &str, label: LabelHandle, sources: &[LabelHandle], labels: &LabelStore) {
        for s in sources {
            if !labels.get(label).covers(labels.get(*s)) {
                self.failures.push(format!("{var} does not cover an operand label"));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tracking_never_changes_values(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = generate(&mut rng, &CorpusConfig::default());
        let host = CorpusHost::new(&mut rng);
        let mut tracked_host = host.clone();
        let env = execute(&p, &analyze_implicit_flows(&p), &mut tracked_host, &mut LabelStore::new()).unwrap();
        let plain = execute_untracked(&p, &mut host.clone()).unwrap();
        let values: BTreeMap<String, Value> = env.into_iter().map(|(k, v)| (k, v.value)).collect();
        prop_assert_eq!(values, plain.env);
        let sent: Vec<(String, Value)> = tracked_host.sent.into_iter().map(|(d, v)| (d, v.value)).collect();
        prop_assert_eq!(sent, plain.outputs);
    }

    #[test]
    fn write_sets_carry_the_guard_label_on_both_outcomes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = generate(&mut rng, &CorpusConfig::default());
        let ann = analyze_implicit_flows(&p);
        let host = CorpusHost::new(&mut rng);
        for a in ann.iter() {
            for outcome in [true, false] {
                let config = ExecConfig { force_guards: [(a.site, outcome)].into(), ..ExecConfig::default() };
                let mut checks = Checks::default();
                execute_with(&p, &ann, &mut host.clone(), &mut LabelStore::new(), &config, &mut checks).unwrap();
                prop_assert!(checks.failures.is_empty(), "{:?}\n{}", checks.failures, p);
            }
        }
    }

    #[test]
    fn pruning_leaves_labels_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = generate(&mut rng, &CorpusConfig::default());
        let host = CorpusHost::new(&mut rng);
        let mut a = LabelStore::new();
        let pruned = execute(&p, &analyze_implicit_flows(&p), &mut host.clone(), &mut a).unwrap();
        let mut b = LabelStore::new();
        let full = execute(&p, &annotate_all(&p), &mut host.clone(), &mut b).unwrap();
        prop_assert_eq!(label_view(&pruned, &a), label_view(&full, &b));
    }

    #[test]
    fn public_outputs_ignore_labeled_inputs(seed in any::<u64>(), flip in 0usize..3, value in -8i64..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = CorpusConfig { natives: false, ..CorpusConfig::default() };
        let p = generate(&mut rng, &config);
        let ann = analyze_implicit_flows(&p);
        let base = CorpusHost::new(&mut rng);
        let mut flipped = base.clone();
        flipped.set_input(SOURCES[flip], value);

        let (mut h1, mut h2) = (base, flipped);
        let e1 = execute(&p, &ann, &mut h1, &mut LabelStore::new()).unwrap();
        let e2 = execute(&p, &ann, &mut h2, &mut LabelStore::new()).unwrap();
        for (name, v) in &e1 {
            if v.tag == LabelHandle::PUBLIC {
                prop_assert_eq!(&e2[name], v, "{} changed\n{}", name, p);
            }
        }
        for (name, v) in &e2 {
            if v.tag == LabelHandle::PUBLIC {
                prop_assert_eq!(&e1[name], v);
            }
        }
        let public = |sent: &[(String, safe_core::taint_vm::TaggedValue)]| -> Vec<Value> {
            sent.iter().filter(|(_, v)| v.tag == LabelHandle::PUBLIC).map(|(_, v)| v.value.clone()).collect()
        };
        prop_assert_eq!(public(&h1.sent), public(&h2.sent));
    }

    #[test]
    fn derived_labels_cover_their_sources(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = generate(&mut rng, &CorpusConfig::default());
        let mut checks = Checks::default();
        execute_with(
            &p,
            &analyze_implicit_flows(&p),
            &mut CorpusHost::new(&mut rng),
            &mut LabelStore::new(),
            &ExecConfig::default(),
            &mut checks,
        )
        .unwrap();
        prop_assert!(checks.failures.is_empty(), "{:?}", checks.failures);
    }
}
