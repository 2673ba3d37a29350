mod common;

use common::*;
use flowcast::geo::{assign_region, dbscan, dbscan_partition, GeoPoint, PartitionParams, Projection, RegionMap};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn matches_brute_force_on_random_instances() {
    for seed in 0..25 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(50..=500);
        let pts = random_points(seed, n);
        let params = PartitionParams {
            epsilon_m: r.random_range(15.0..90.0),
            min_pts: r.random_range(2..=12),
        };
        let fast = dbscan_partition(&pts, &params).unwrap();
        let slow = brute_dbscan(&pts, &params);
        assert_eq!(as_sets(&fast.labels), as_sets(&slow), "seed {seed} {params:?}");
    }
}

#[test]
fn three_separated_blobs() {
    let proj = Projection::new(LON0, LAT0);
    let mut r = rng(5);
    let mut pts = Vec::new();
    for b in 0..3 {
        for _ in 0..50 {
            // diameter under 30 m, blobs 1000 m apart
            let a = r.random_range(0.0..std::f64::consts::TAU);
            let d = r.random_range(0.0..15.0);
            pts.push(proj.unproject([1000.0 * b as f64 + d * a.cos(), d * a.sin()]));
        }
    }
    let params = PartitionParams {
        epsilon_m: 70.0,
        min_pts: 5,
    };
    let regions = dbscan(&pts, &params).unwrap();
    assert_eq!(regions.len(), 3);
    assert!(regions.iter().all(|r| r.member_count == 50 && r.members.len() == 50));
    assert_eq!(
        as_sets(&dbscan_partition(&pts, &params).unwrap().labels),
        as_sets(&brute_dbscan(&pts, &params))
    );
}

#[test]
fn region_invariants() {
    let pts = random_points(77, 400);
    let params = PartitionParams {
        epsilon_m: 50.0,
        min_pts: 6,
    };
    let part = dbscan_partition(&pts, &params).unwrap();
    let mut seen = std::collections::HashSet::new();
    for (k, reg) in part.regions.iter().enumerate() {
        assert_eq!(reg.id, k);
        assert!(!reg.members.is_empty());
        let n = reg.members.len() as f64;
        let lon = reg.members.iter().map(|p| p.lon).sum::<f64>() / n;
        let lat = reg.members.iter().map(|p| p.lat).sum::<f64>() / n;
        assert!((reg.centroid.lon - lon).abs() < 1e-12 && (reg.centroid.lat - lat).abs() < 1e-12);
        if k > 0 {
            assert!(part.regions[k - 1].member_count >= reg.member_count);
        }
    }
    for (i, l) in part.labels.iter().enumerate() {
        if let Some(l) = l {
            assert!(seen.insert(i));
            assert!(part.regions[*l].members.contains(&pts[i]));
        }
    }
}

#[test]
fn member_lookup_on_compact_regions() {
    let proj = Projection::new(LON0, LAT0);
    let mut r = rng(9);
    let pts: Vec<GeoPoint> = (0..4)
        .flat_map(|b| {
            let c = [700.0 * b as f64, 300.0 * (b % 2) as f64];
            (0..40)
                .map(|_| proj.unproject([c[0] + 8.0 * gauss(&mut r), c[1] + 8.0 * gauss(&mut r)]))
                .collect::<Vec<_>>()
        })
        .collect();
    let params = PartitionParams {
        epsilon_m: 70.0,
        min_pts: 5,
    };
    let part = dbscan_partition(&pts, &params).unwrap();
    let map = RegionMap::new(part.regions.clone(), params.epsilon_m).unwrap();
    for (i, l) in part.labels.iter().enumerate() {
        assert_eq!(assign_region(pts[i], &map), *l);
    }
}

#[test]
fn assignment_matches_exhaustive_scan() {
    let map = {
        let proj = Projection::new(LON0, LAT0);
        let mut r = rng(3);
        let regions = (0..15)
            .map(|k| flowcast::geo::Region {
                id: k,
                centroid: proj.unproject([r.random_range(-2000.0..2000.0), r.random_range(-2000.0..2000.0)]),
                member_count: 1,
                members: vec![],
            })
            .collect();
        RegionMap::new(regions, 400.0).unwrap()
    };
    let proj = *map.projection();
    let mut r = rng(4);
    for _ in 0..1000 {
        let p = proj.unproject([r.random_range(-2500.0..2500.0), r.random_range(-2500.0..2500.0)]);
        let mut best: Option<(f64, usize)> = None;
        for reg in &map.regions {
            let d = proj.distance(p, reg.centroid);
            if d <= 400.0 && best.is_none_or(|b| d < b.0) {
                best = Some((d, reg.id));
            }
        }
        assert_eq!(map.assign(p), best.map(|b| b.1));
    }
}

#[test]
fn centroid_and_beyond_radius() {
    let map = line_map(5, 70.0);
    assert_eq!(assign_region(map.regions[3].centroid, &map), Some(3));
    // 71 m off the line is 71 m from the nearest centroid
    let proj = *map.projection();
    let c = proj.project(map.regions[2].centroid);
    assert_eq!(map.assign(proj.unproject([c[0], c[1] + 71.0])), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_is_order_independent(seed in 0u64..10_000, n in 20usize..250) {
        let pts = random_points(seed, n);
        let params = PartitionParams { epsilon_m: 45.0, min_pts: 4 };
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 0xabc));
        let shuffled: Vec<GeoPoint> = perm.iter().map(|&i| pts[i]).collect();
        let a = dbscan_partition(&pts, &params).unwrap();
        let b = dbscan_partition(&shuffled, &params).unwrap();
        let back: Vec<Option<usize>> = {
            let mut v = vec![None; n];
            for (k, &i) in perm.iter().enumerate() {
                v[i] = b.labels[k];
            }
            v
        };
        prop_assert_eq!(as_sets(&a.labels), as_sets(&back));
    }

    #[test]
    fn every_clustered_point_in_exactly_one_region(seed in 0u64..10_000) {
        let pts = random_points(seed, 200);
        let params = PartitionParams { epsilon_m: 60.0, min_pts: 5 };
        let part = dbscan_partition(&pts, &params).unwrap();
        let total: usize = part.regions.iter().map(|r| r.member_count).sum();
        prop_assert_eq!(total, part.labels.iter().filter(|l| l.is_some()).count());
    }
}
