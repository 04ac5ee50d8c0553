use ctmap::io::{decode_ply, encode_ply, read_ply, read_surfel_csv, read_trajectory_csv, write_ply, write_surfel_csv, write_trajectory_csv, IoError};
use ctmap::lie::Pose;
use ctmap::surfel_map::{DenseSurfel, SurfelMap};
use ctmap::{Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn random_surfel(rng: &mut ChaCha8Rng) -> DenseSurfel {
    let spd = |rng: &mut ChaCha8Rng, s: f64| {
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        (a * a.transpose() + Mat3::identity() * 0.1) * s
    };
    DenseSurfel {
        position: Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(0.0..10.0)),
        normal: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0)).normalize(),
        position_cov: spd(rng, 1e-5),
        scatter: spd(rng, 1e-3),
        dof: rng.random_range(3.0..100.0),
        obs_count: rng.random_range(1..50),
        timestamp: rng.random_range(0.0..1e4),
        radius: 0.02,
        colour: [rng.random(), rng.random(), rng.random()],
        colour_sigma: rng.random_range(0.01..0.5),
        stable: rng.random(),
        beam_noise: spd(rng, 1e-6),
    }
}

fn random_map(n: usize, seed: u64) -> SurfelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SurfelMap::from_surfels((0..n).map(|_| random_surfel(&mut rng)))
}

#[test]
fn large_ply_round_trip_is_bit_exact() {
    let map = random_map(100_000, 1);
    let first = encode_ply(&map);
    let decoded = decode_ply(&first).unwrap();
    assert_eq!(decoded.len(), 100_000);
    let second = encode_ply(&SurfelMap::from_surfels(decoded));
    assert_eq!(hex::encode(Sha256::digest(&first)), hex::encode(Sha256::digest(&second)));
}

#[test]
fn empty_map_round_trip() {
    let bytes = encode_ply(&SurfelMap::default());
    assert!(decode_ply(&bytes).unwrap().is_empty());
    let mut csv = Vec::new();
    write_surfel_csv(&mut csv, &[]).unwrap();
    assert!(read_surfel_csv(csv.as_slice()).unwrap().is_empty());
}

#[test]
fn truncated_ply_is_rejected() {
    let bytes = encode_ply(&random_map(50, 2));
    for cut in [bytes.len() - 1, bytes.len() - 200, 40, 0] {
        assert!(decode_ply(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn malformed_header_reports_offset() {
    let bytes = encode_ply(&random_map(3, 3));
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("element vertex").unwrap();
    let mut broken = bytes.clone();
    broken[at..at + 7].copy_from_slice(b"elemant");
    match decode_ply(&broken) {
        Err(IoError::Parse { offset, .. }) => assert_eq!(offset, at),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let mut wrong_magic = bytes;
    wrong_magic[0] = b'q';
    assert!(matches!(decode_ply(&wrong_magic), Err(IoError::Parse { offset: 0, .. })));
}

#[test]
fn ply_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.ply");
    let map = random_map(500, 4);
    write_ply(&path, &map).unwrap();
    let back = read_ply(&path).unwrap();
    assert_eq!(encode_ply(&SurfelMap::from_surfels(back)), encode_ply(&map));
}

#[test]
fn surfel_csv_holds_the_ply_values() {
    let map = random_map(300, 5);
    let from_ply = decode_ply(&encode_ply(&map)).unwrap();
    let mut buf = Vec::new();
    write_surfel_csv(&mut buf, &from_ply).unwrap();
    let from_csv = read_surfel_csv(buf.as_slice()).unwrap();
    assert_eq!(from_csv, from_ply);
    let direct: Vec<DenseSurfel> = map.iter().map(|(_, s)| s.clone()).collect();
    let mut first = Vec::new();
    write_surfel_csv(&mut first, &direct).unwrap();
    assert_eq!(first, buf);
}

#[test]
fn trajectory_csv_is_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let poses: Vec<(f64, Pose)> = (0..200)
        .map(|i| {
            let r = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let t = Vec3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            (i as f64 * 0.01, Pose::from_rotation_vector(r, t))
        })
        .collect();
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, poses.iter().map(|(t, p)| (*t, p))).unwrap();
    let back = read_trajectory_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), poses.len());
    for ((ta, a), (tb, b)) in poses.iter().zip(&back) {
        assert_eq!(ta, tb);
        assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-12);
    }
}

#[test]
fn truncated_csv_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let surfels: Vec<DenseSurfel> = (0..5).map(|_| random_surfel(&mut rng)).collect();
    let mut buf = Vec::new();
    write_surfel_csv(&mut buf, &surfels).unwrap();
    let cut = buf.len() - 30;
    assert!(read_surfel_csv(&buf[..cut]).is_err());
}
