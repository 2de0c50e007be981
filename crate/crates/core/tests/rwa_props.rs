mod common;

use common::oracle::*;
use proptest::collection::vec;
use proptest::prelude::*;
use qnet_core::ids::{LinkId, NodeId, RequestId};
use qnet_core::rwa::{
    assign_first_fit, path_weight, release_allocation, route_bsm, route_entanglement,
    shortest_path, RouteAllocation, RwaConfig, RwaError, WeightCoefficients,
};
use qnet_core::topology::{
    eps_channel_pairs, load_topology, Band, Claim, EpsFeatures, WavelengthChannel,
};
use qnet_core::Topology;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dyadic_graph() -> impl Strategy<Value = GraphSpec> {
    (2usize..=8).prop_flat_map(|n| {
        let edge =
            (0..n, 1..n, 1u32..=40, 1u32..=8).prop_map(move |(a, off, len, grid)| EdgeSpec {
                a,
                b: (a + off) % n,
                length_km: len as f64 * 0.25,
                att_o: 0.5,
                att_c: 0.25,
                pdl_db: 0.0,
                pmd: 0.0,
                grid,
            });
        (vec(0u8..=8, n), vec(edge, 0..=14)).prop_map(|(ins, edges)| GraphSpec {
            insertion_db: ins.into_iter().map(|i| i as f64 * 0.125).collect(),
            edges,
        })
    })
}

fn band() -> impl Strategy<Value = Band> {
    prop_oneof![Just(Band::O), Just(Band::C)]
}

/// Random occupancy on a built graph, owned by request 99.
fn occupy_randomly(t: &mut Topology, picks: &[(usize, u32, bool)]) {
    let links: Vec<LinkId> = t.links().map(|l| l.id.clone()).collect();
    if links.is_empty() {
        return;
    }
    for &(li, idx, o) in picks {
        let link = &links[li % links.len()];
        let grid = t.link(link).unwrap().total_wavelengths;
        let ch = WavelengthChannel::new(if o { Band::O } else { Band::C }, idx % grid);
        let _ = t.occupy(link, ch, RequestId(99));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn shortest_path_matches_exhaustive_search(g in dyadic_graph(), s in 0usize..8, d in 0usize..8, band in band()) {
        let t = g.build();
        let n = g.node_count();
        let (src, dst) = (node_name(s % n), node_name(d % n));
        let k = WeightCoefficients::default();
        let got = shortest_path(&t, &src, &dst, band, &k);
        if src == dst {
            prop_assert!(matches!(got, Err(RwaError::SameEndpoints(_))));
            return Ok(());
        }
        match brute_shortest(&t, &src, &dst, band, &k) {
            None => prop_assert!(matches!(got, Err(RwaError::NoPath { .. })), "{got:?}"),
            Some((w, path)) => {
                let hops = got.unwrap();
                prop_assert_eq!(path_weight(&t, &hops, band, &k).unwrap().0, w);
                prop_assert_eq!(hops, path);
            }
        }
    }

    #[test]
    fn shortest_path_weight_optimal_with_real_weights(seed in any::<u64>(), band in band(), pdl in 0.0..2.0f64, pmd in 0.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GraphSpec::random(&mut rng, false);
        let t = g.build();
        let k = WeightCoefficients { alpha_pdl: pdl, alpha_pmd: pmd };
        for s in 0..g.node_count() {
            for d in 0..g.node_count() {
                if s == d {
                    continue;
                }
                let (src, dst) = (node_name(s), node_name(d));
                let got = shortest_path(&t, &src, &dst, band, &k).ok();
                let want = brute_shortest(&t, &src, &dst, band, &k);
                prop_assert_eq!(got.is_some(), want.is_some());
                if let (Some(hops), Some((w, _))) = (got, want) {
                    prop_assert_eq!(path_weight(&t, &hops, band, &k).unwrap().0, w);
                }
            }
        }
    }

    #[test]
    fn first_fit_matches_brute_force(
        g in dyadic_graph(),
        picks in vec((0usize..14, 0u32..8, any::<bool>()), 0..40),
        s in 0usize..8,
        d in 0usize..8,
        band in band(),
    ) {
        let mut t = g.build();
        occupy_randomly(&mut t, &picks);
        let n = g.node_count();
        let Ok(hops) = shortest_path(&t, &node_name(s % n), &node_name(d % n), band, &WeightCoefficients::default()) else {
            return Ok(());
        };
        let got = assign_first_fit(&t, &hops, band).ok();
        prop_assert_eq!(got, brute_first_fit(&t, &hops, band));
    }

    #[test]
    fn document_round_trip(g in dyadic_graph()) {
        let t = g.build();
        let doc = t.to_document();
        let back = load_topology(&doc).unwrap();
        prop_assert_eq!(back.to_document(), doc);
        prop_assert_eq!(back.version(), 1);
        prop_assert!(back.nodes().eq(t.nodes()));
        prop_assert!(back.links().eq(t.links()));
    }

    #[test]
    fn occupancy_mutations_are_atomic(
        g in dyadic_graph(),
        ops in vec((vec((0usize..14, 0u32..10, any::<bool>()), 1..4), any::<bool>(), 1u64..4), 1..30),
    ) {
        let mut t = g.build();
        let links: Vec<LinkId> = t.links().map(|l| l.id.clone()).collect();
        prop_assume!(!links.is_empty());
        for (raw, release, owner) in ops {
            let claims: Vec<Claim> = raw
                .iter()
                .map(|&(li, idx, o)| Claim {
                    link: links[li % links.len()].clone(),
                    channel: WavelengthChannel::new(if o { Band::O } else { Band::C }, idx),
                    owner: RequestId(owner),
                })
                .collect();
            let before = t.occupancy();
            let version = t.version();
            let result = if release { t.release_all(&claims) } else { t.occupy_all(&claims) };
            match result {
                Ok(()) => {
                    prop_assert!(t.version() > version);
                    for c in &claims {
                        let held = t.link(&c.link).unwrap().occupied.get(&c.channel).copied();
                        prop_assert_eq!(held, if release { None } else { Some(c.owner) });
                    }
                }
                Err(_) => {
                    prop_assert_eq!(t.occupancy(), before);
                    prop_assert_eq!(t.version(), version);
                }
            }
            for l in t.links() {
                for b in [Band::O, Band::C] {
                    prop_assert!(l.occupied_in(b) <= l.total_wavelengths as usize);
                }
            }
        }
    }

    #[test]
    fn occupy_then_release_restores(
        g in dyadic_graph(),
        pre in vec((0usize..14, 0u32..8, any::<bool>()), 0..20),
        raw in vec((0usize..14, 0u32..8, any::<bool>()), 1..6),
    ) {
        let mut t = g.build();
        occupy_randomly(&mut t, &pre);
        let links: Vec<LinkId> = t.links().map(|l| l.id.clone()).collect();
        prop_assume!(!links.is_empty());
        let claims: Vec<Claim> = raw
            .iter()
            .map(|&(li, idx, o)| Claim {
                link: links[li % links.len()].clone(),
                channel: WavelengthChannel::new(if o { Band::O } else { Band::C }, idx),
                owner: RequestId(5),
            })
            .collect();
        let before = t.occupancy();
        if t.occupy_all(&claims).is_ok() {
            t.release_all(&claims).unwrap();
            prop_assert_eq!(t.occupancy(), before);
            prop_assert!(t.release_all(&claims).is_err());
        }
    }

    #[test]
    fn eps_pairs_partition_the_grid(half in 1u32..64, band in band()) {
        let n = 2 * half;
        let pairs = eps_channel_pairs(&EpsFeatures { pair_rate_cps: 1.0, wavelengths: n, band }).unwrap();
        prop_assert_eq!(pairs.len() as u32, half);
        let mut seen: Vec<u32> = pairs.iter().flat_map(|(a, b)| [a.index, b.index]).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for (a, b) in pairs {
            prop_assert_eq!(a.index + b.index, n - 1);
            prop_assert_eq!((a.band, b.band), (band, band));
        }
        let odd = EpsFeatures { pair_rate_cps: 1.0, wavelengths: n + 1, band };
        prop_assert!(eps_channel_pairs(&odd).is_err());
    }

    /// Random allocate/release sequences on the shipped topology: every path
    /// keeps one channel on all hops, occupancy equals the hop count of live
    /// paths, and failed allocations change nothing.
    #[test]
    fn allocations_conserve_channels(ops in vec((0usize..8, 0usize..4, 0usize..4, any::<bool>(), any::<bool>()), 1..40)) {
        let mut t = metro_topology();
        let eps = [NodeId::new("fnal-eps"), NodeId::new("anl-eps")];
        let q = ["fnal-q1", "fnal-q2", "anl-q1", "nu-q1"].map(NodeId::new);
        let bsm = NodeId::new("sl-bsm");
        let mut live: Vec<RouteAllocation> = Vec::new();
        for (i, (kind, a, b, clocks, release)) in ops.into_iter().enumerate() {
            if release && !live.is_empty() {
                let gone = live.remove(i % live.len());
                release_allocation(&mut t, &gone).unwrap();
                prop_assert!(release_allocation(&mut t, &gone).is_err());
            } else {
                let cfg = RwaConfig { clock_paths: clocks, ..RwaConfig::default() };
                let id = RequestId(i as u64 + 1);
                let before = t.occupancy();
                let result = if kind < 6 {
                    route_entanglement(&mut t, id, &eps[kind % 2], &q[a], &q[b], &cfg).map(RouteAllocation::Direct)
                } else {
                    route_bsm(&mut t, id, &eps[0], &eps[1], &bsm, &q[a], &q[b], &cfg)
                        .map(|(first, second)| RouteAllocation::Swap { bsm: bsm.clone(), first, second })
                };
                match result {
                    Ok(alloc) => live.push(alloc),
                    Err(_) => prop_assert_eq!(t.occupancy(), before),
                }
            }
            let mut hops = 0;
            for alloc in &live {
                for r in alloc.routes() {
                    for p in r.legs().chain(r.clock_paths.iter()) {
                        hops += p.hops.len();
                        for h in &p.hops {
                            let owner = t.link(h).unwrap().occupied.get(&p.channel).copied();
                            prop_assert_eq!(owner, Some(p.request_id));
                        }
                    }
                }
            }
            prop_assert_eq!(t.occupancy_total(), hops);
        }
        for alloc in &live {
            release_allocation(&mut t, alloc).unwrap();
        }
        prop_assert_eq!(t.occupancy_total(), 0);
    }

    #[test]
    fn neighbor_index_tracks_removals(g in dyadic_graph(), drop_links in vec(0usize..14, 0..6), drop_node in proptest::option::of(0usize..8)) {
        let mut t = g.build();
        let ids: Vec<LinkId> = t.links().map(|l| l.id.clone()).collect();
        for i in drop_links {
            if let Some(id) = ids.get(i) {
                let _ = t.remove_link(id);
            }
        }
        if let Some(n) = drop_node {
            let _ = t.remove_node(&node_name(n % g.node_count()));
        }
        let nodes: Vec<NodeId> = t.nodes().map(|n| n.id.clone()).collect();
        for n in &nodes {
            let got: Vec<(LinkId, NodeId)> = t.neighbors(n).unwrap().into_iter().map(|(l, p)| (l.id.clone(), p.clone())).collect();
            let want: Vec<(LinkId, NodeId)> = t.links().filter_map(|l| l.peer(n).map(|p| (l.id.clone(), p.clone()))).collect();
            prop_assert_eq!(got, want);
            for l in t.links() {
                for end in [&l.a, &l.b] {
                    prop_assert_eq!(t.link_at(end).map(|x| &x.id), Some(&l.id));
                }
            }
        }
        prop_assert!(t.links().all(|l| nodes.contains(&l.a.node) && nodes.contains(&l.b.node)));
    }
}

#[test]
fn routing_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let g = GraphSpec::random(&mut rng, false);
        let (a, b) = (g.build(), g.build());
        for s in 0..g.node_count() {
            for d in 0..g.node_count() {
                let k = WeightCoefficients::default();
                assert_eq!(
                    shortest_path(&a, &node_name(s), &node_name(d), Band::O, &k),
                    shortest_path(&b, &node_name(s), &node_name(d), Band::O, &k)
                );
            }
        }
    }
}

#[test]
fn shared_fiber_to_bsm_gets_distinct_channels() {
    let mut t = metro_topology();
    let cfg = RwaConfig::default();
    let (first, second) = route_bsm(
        &mut t,
        RequestId(1),
        &"fnal-eps".into(),
        &"anl-eps".into(),
        &"sl-bsm".into(),
        &"fnal-q1".into(),
        &"anl-q1".into(),
        &cfg,
    )
    .unwrap();
    let shared = LinkId::new("sl-bsm-link");
    assert!(first.leg_b.hops.contains(&shared) && second.leg_b.hops.contains(&shared));
    assert_ne!(first.leg_b.channel, second.leg_b.channel);
}

#[test]
fn unreachable_bsm_leaves_occupancy_untouched() {
    let mut t = metro_topology();
    t.remove_link(&"anl-sl".into()).unwrap();
    let before = t.occupancy();
    let r = route_bsm(
        &mut t,
        RequestId(1),
        &"fnal-eps".into(),
        &"anl-eps".into(),
        &"sl-bsm".into(),
        &"fnal-q1".into(),
        &"anl-q1".into(),
        &RwaConfig::default(),
    );
    assert!(r.is_err());
    assert_eq!(t.occupancy(), before);
}
