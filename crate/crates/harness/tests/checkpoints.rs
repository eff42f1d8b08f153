//! Checkpoint files: logits survive a save/load cycle, damage never panics.

use proptest::prelude::*;
use rand::Rng;
use tnn_core::controller::{controller_spec, ActionSet, ControllerPolicy};
use tnn_core::gating::{Ordering, Utilization};
use tnn_core::objectives::{BernoulliGatePolicy, PolicyInput};
use tnn_core::rng::seeded;
use tnn_core::tmodule::{resnet_d, vgg_w, TNetwork};
use tnn_core::Tensor;
use tnn_harness::checkpoint::{Checkpoint, Metadata};

fn input(n: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(-1.0..1.0))
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn datapath_logits_are_bit_identical_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(6, 1);
    for spec in [
        vgg_w(&[1, 8, 8], 8, 4, 10, Ordering::Nested),
        resnet_d(&[1, 8, 8], 4, &[1, 1], 10),
    ] {
        let net: TNetwork = TNetwork::build(&spec, &mut seeded(2)).unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::of_network(&net, Metadata::default()).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().datapath().unwrap();
        for u in [0.3, 1.0] {
            let gates = net.draw_gates(Utilization::new(u).unwrap(), &mut seeded(0)).unwrap();
            assert_eq!(
                bits(&net.forward(&x, &gates).unwrap()),
                bits(&back.forward(&x, &gates).unwrap())
            );
        }
    }
}

#[test]
fn policies_reload_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let x = input(4, 3);
    let ctrl = ControllerPolicy::new(
        TNetwork::build(&controller_spec(&[1, 8, 8], 10), &mut seeded(4)).unwrap(),
        ActionSet::default(),
    )
    .unwrap();
    let path = dir.path().join("c.ckpt");
    Checkpoint::of_controller(&ctrl, Metadata::default())
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap().controller().unwrap();
    assert_eq!(bits(&ctrl.scores(&x).unwrap()), bits(&back.scores(&x).unwrap()));
    assert_eq!(ctrl.actions, back.actions);

    let gates = BernoulliGatePolicy::new(PolicyInput::Contextual, &[4, 4], 64, 8, &mut seeded(5)).unwrap();
    let path = dir.path().join("g.ckpt");
    Checkpoint::of_gate_policy(&gates, Metadata::default())
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap().gate_policy().unwrap();
    let u = Utilization::new(0.4).unwrap();
    assert_eq!(bits(&gates.probs(&x, u).unwrap()), bits(&back.probs(&x, u).unwrap()));
}

fn small_bytes() -> Vec<u8> {
    let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 4, 2, 3, Ordering::Nested), &mut seeded(0)).unwrap();
    Checkpoint::of_network(&net, Metadata::default()).to_bytes()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_truncation_is_an_error(cut in 0usize..1000) {
        let bytes = small_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn any_single_bit_flip_is_an_error(pos in 0usize..100_000, bit in 0u8..8) {
        let mut bytes = small_bytes();
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
