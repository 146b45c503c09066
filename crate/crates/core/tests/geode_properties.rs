use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safe_core::geode::{GeodeError, GeodeProxy, Requester};
use safe_core::labels::DataLabel;
use safe_core::principals::{Directory, PrincipalId, PrincipalKind};

struct Flat;

impl Directory for Flat {
    fn kind_of(&self, _: PrincipalId) -> Option<PrincipalKind> {
        Some(PrincipalKind::User)
    }

    fn group_members(&self, _: PrincipalId) -> Option<BTreeSet<PrincipalId>> {
        None
    }
}

fn pid(n: u64) -> PrincipalId {
    PrincipalId::new(n).unwrap()
}

fn app() -> Requester {
    Requester::Verified { app: pid(9) }
}

fn filled(seed: u64, values: &[Vec<u8>]) -> GeodeProxy {
    let mut proxy = GeodeProxy::new(&mut ChaCha8Rng::seed_from_u64(seed));
    let label = DataLabel::new([pid(1)], [pid(1), pid(2)]).unwrap();
    for (i, v) in values.iter().enumerate() {
        proxy.put(&format!("k{i}"), v, &label, app()).unwrap();
    }
    proxy
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn backend_never_holds_plaintext_blocks(
        seed in any::<u64>(),
        values in prop::collection::vec(prop::collection::vec(any::<u8>(), 16..80), 1..5),
    ) {
        let proxy = filled(seed, &values);
        for v in &values {
            for window in v.windows(16) {
                for stored in proxy.backend().values() {
                    prop_assert!(!stored.windows(16).any(|w| w == window));
                }
            }
        }
    }

    #[test]
    fn counter_tracks_committed_writes(seed in any::<u64>(), n in 1usize..8) {
        let values: Vec<Vec<u8>> = (0..n).map(|i| vec![i as u8; 4]).collect();
        let start = GeodeProxy::new(&mut ChaCha8Rng::seed_from_u64(seed)).counter();
        let proxy = filled(seed, &values);
        prop_assert_eq!(proxy.counter(), start + n as u64);
        for (i, v) in values.iter().enumerate() {
            prop_assert_eq!(&proxy.get(&format!("k{i}"), app(), &Flat).unwrap().0, v);
        }
    }

    #[test]
    fn single_byte_tampering_never_yields_wrong_plaintext(
        seed in any::<u64>(),
        pick in any::<prop::sample::Index>(),
        offset in any::<prop::sample::Index>(),
        mask in 1u8..,
    ) {
        let values = vec![b"first value".to_vec(), b"second value, a bit longer".to_vec()];
        let mut proxy = filled(seed, &values);
        let keys: Vec<String> = proxy.backend().keys().map(str::to_owned).collect();
        let key = pick.get(&keys);
        let len = proxy.backend().get(key).unwrap().len();
        prop_assert!(proxy.backend_mut().tamper(key, offset.index(len), mask));
        for (i, v) in values.iter().enumerate() {
            match proxy.get(&format!("k{i}"), app(), &Flat) {
                Ok((plain, _)) => prop_assert_eq!(&plain, v),
                Err(e) => prop_assert!(
                    matches!(e, GeodeError::IntegrityViolation(_) | GeodeError::RollbackDetected { .. }),
                    "{e}"
                ),
            }
        }
    }
}
