mod support;

use fedsim::fedserver::fedavg;
use fedsim::rngkit::RngStream;
use proptest::prelude::*;
use support::{f32_ulp, fedavg_worst_ulps, random_fedavg_instance, single_layout as layout, uplinks, witness_fixture};

fn is_signaling_nan(bits: u32) -> bool {
    bits & 0x7f80_0000 == 0x7f80_0000 && bits & 0x007f_ffff != 0 && bits & 0x0040_0000 == 0
}

#[test]
fn matches_double_precision_mean_on_random_instances() {
    let mut s = RngStream::from_seed(77);
    for i in 0..50 {
        let inst = random_fedavg_instance(&mut s, true);
        let u = fedavg_worst_ulps(&inst, false);
        assert!(u <= 4.0, "positive instance {i}: {u} ulps");
        let inst = random_fedavg_instance(&mut s, false);
        let u = fedavg_worst_ulps(&inst, true);
        assert!(u <= 4.0, "mixed-sign instance {i}: {u} ulps of scale");
    }
}

#[test]
fn frozen_non_associativity_witness() {
    let (counts, values, expected) = witness_fixture();
    assert_eq!(counts.len(), 3);
    let l = layout(1);
    let forward = fedavg(&uplinks(&l, &values, &counts), &l).unwrap();
    let mut ups = uplinks(&l, &values, &counts);
    ups.reverse();
    let reversed = fedavg(&ups, &l).unwrap();
    assert_eq!(forward.values()[0].to_bits(), expected.0);
    assert_eq!(reversed.values()[0].to_bits(), expected.1);
    assert_ne!(expected.0, expected.1);
}

#[test]
fn three_identical_uplinks_can_land_two_ulps_away() {
    // f32 weights summing to slightly off 1 plus three rounded additions
    let v = f32::from_bits(0x3ffc_5e3c);
    let l = layout(1);
    let got = fedavg(&uplinks(&l, &[vec![v], vec![v], vec![v]], &[580, 367, 389]), &l).unwrap();
    assert_eq!(got.values()[0].to_bits(), 0x3ffc_5e3e);
}

proptest! {
    // Arithmetic quiets signaling NaNs, so those are the one excluded pattern.
    #[test]
    fn single_uplink_is_bit_exact(
        bits in prop::collection::vec(any::<u32>().prop_filter("signaling NaN", |b| !is_signaling_nan(*b)), 1..32),
        count in 1usize..10_000,
    ) {
        let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let l = layout(values.len());
        let got = fedavg(&uplinks(&l, &[values], &[count]), &l).unwrap();
        let got_bits: Vec<u32> = got.values().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got_bits, bits);
    }

    // Holds for one or two uplinks; see the counterexample below for three.
    #[test]
    fn identical_uplinks_average_to_within_one_ulp(
        values in prop::collection::vec(-1e3f32..1e3, 1..16),
        counts in prop::collection::vec(1usize..1000, 1..=2),
    ) {
        let l = layout(values.len());
        let copies = vec![values.clone(); counts.len()];
        let got = fedavg(&uplinks(&l, &copies, &counts), &l).unwrap();
        for (&g, &v) in got.values().iter().zip(&values) {
            let err = (f64::from(g) - f64::from(v)).abs();
            prop_assert!(err <= f32_ulp(f64::from(v)), "{} vs {} with counts {:?}", g, v, counts);
        }
    }

    #[test]
    fn same_list_order_same_bits(seed in any::<u64>()) {
        let inst = random_fedavg_instance(&mut RngStream::from_seed(seed), false);
        let l = layout(inst.values[0].len());
        let a = fedavg(&uplinks(&l, &inst.values, &inst.counts), &l).unwrap();
        let b = fedavg(&uplinks(&l, &inst.values, &inst.counts), &l).unwrap();
        prop_assert_eq!(fedsim::fedserver::model_hash(&a), fedsim::fedserver::model_hash(&b));
    }
}
