use proptest::prelude::*;
use serde_json::json;
use xmodal::nets::{build_discriminator, build_trunk, DiscriminatorSpec, TrunkHead, TrunkSpec};
use xmodal::tensor::Tensor;
use xmodal_cli::checkpoint::{Checkpoint, MAGIC};

fn sample() -> Checkpoint {
    let mut ck = Checkpoint::new(json!({ "kind": "test", "step": 3 }));
    let net = build_discriminator::<f32>(&DiscriminatorSpec::desk(1, 3), 4).unwrap();
    ck.insert_net("d1", &net).unwrap();
    ck
}

#[test]
fn bytes_round_trip_exactly() {
    let ck = sample();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn network_round_trip_is_bit_exact() {
    let spec = DiscriminatorSpec::desk(1, 3);
    let mut net = build_discriminator::<f32>(&spec, 4).unwrap();
    net.adam_t = 17;
    for p in net.params.values_mut() {
        p.adam_m = Tensor::new(
            p.value.shape().to_vec(),
            p.value.data().iter().map(|v| v * 0.5 + 1e-7).collect(),
        )
        .unwrap();
    }
    let mut ck = Checkpoint::new(json!({}));
    ck.insert_net("d1", &net).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let mut restored = build_discriminator::<f32>(&spec, 99).unwrap();
    back.restore_net("d1", &mut restored).unwrap();
    assert_eq!(restored, net);
}

#[test]
fn mismatched_network_is_rejected() {
    let ck = sample();
    let mut other = build_discriminator::<f32>(&DiscriminatorSpec::desk(2, 3), 0).unwrap();
    assert!(ck.restore_net("d1", &mut other).is_err());
    let mut trunk = build_trunk::<f32>(&TrunkSpec::desk(1, 4, TrunkHead::Logits), 0).unwrap();
    assert!(ck.restore_net("d1", &mut trunk).is_err());
    assert!(ck.restore_net("g", &mut other).is_err());
}

#[test]
fn corrupt_bytes_are_rejected() {
    let bytes = sample().to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'Y';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let ck = sample();
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert_eq!(ck.field::<u64>("step").unwrap(), 3);
    assert!(ck.field::<u64>("missing").is_err());
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..4), seed in 0u32..1000) {
        let mut ck = Checkpoint::new(json!({ "seed": seed }));
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(j as u32) & 0x7f7f_ffff)).collect();
            ck.tensors.insert(format!("t{i}"), Tensor::new(shape.clone(), data).unwrap());
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
