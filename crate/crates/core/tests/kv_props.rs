use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use sage_core::fault::CrashInjector;
use sage_core::index::{DelAck, Record};
use sage_core::telemetry::{Addb, Clock};
use sage_core::tier::{DeviceProfile, DeviceSet};
use sage_core::{DeviceId, Store, StoreConfig, TierId};

#[derive(Debug, Clone)]
enum Op {
    Put(Vec<u8>, Vec<u8>),
    Del(Vec<u8>),
    Get(Vec<u8>),
    Next(Vec<u8>, usize),
}

fn key() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 1..4)
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (key(), prop::collection::vec(any::<u8>(), 0..8)).prop_map(|(k, v)| Op::Put(k, v)),
        key().prop_map(Op::Del),
        key().prop_map(Op::Get),
        (key(), 1usize..6).prop_map(|(k, n)| Op::Next(k, n)),
    ]
}

fn open(dir: &std::path::Path, injector: Arc<CrashInjector>) -> Store {
    let profile = DeviceProfile::default_for(TierId(1));
    let devices = DeviceSet::open_dir(
        &dir.join("dev"),
        4096,
        &[(DeviceId(0), TierId(1), profile)],
        injector.clone(),
    )
    .unwrap();
    Store::open(
        dir.join("meta"),
        StoreConfig::default(),
        Arc::new(devices),
        injector,
        Clock::new(),
        Arc::new(Addb::new()),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn index_behaves_like_an_ordered_map(ops in prop::collection::vec(op(), 1..200)) {
        let dir = tempfile::tempdir().unwrap();
        let injector = Arc::new(CrashInjector::new());
        let mut s = open(dir.path(), injector.clone());
        let idx = s.new_index_id();
        s.idx_create(idx).unwrap();
        let mut model: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
        for op in ops {
            match op {
                Op::Put(k, v) => {
                    s.idx_put(idx, vec![Record::new(k.clone(), v.clone())]).unwrap();
                    model.insert(k, v);
                }
                Op::Del(k) => {
                    let want = if model.remove(&k).is_some() { DelAck::Deleted } else { DelAck::NotFound };
                    prop_assert_eq!(s.idx_del(idx, vec![k]).unwrap(), vec![want]);
                }
                Op::Get(k) => {
                    prop_assert_eq!(s.idx_get(idx, std::slice::from_ref(&k)).unwrap(), vec![model.get(&k).cloned()]);
                }
                Op::Next(k, n) => {
                    let got: Vec<(Vec<u8>, Vec<u8>)> = s.idx_next(idx, std::slice::from_ref(&k), n).unwrap().remove(0)
                        .into_iter().map(|r| (r.key, r.value)).collect();
                    let want: Vec<(Vec<u8>, Vec<u8>)> = model.range(k.clone()..).filter(|(x, _)| **x > k).take(n)
                        .map(|(a, b)| (a.clone(), b.clone())).collect();
                    prop_assert_eq!(got, want);
                }
            }
        }
        drop(s);
        let s = open(dir.path(), injector);
        let stored: BTreeMap<Vec<u8>, Vec<u8>> = s.index(idx).unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        prop_assert_eq!(stored, model);
    }
}
