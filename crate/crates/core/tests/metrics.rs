use proptest::prelude::*;

use semfuzz_core::eval::{
    jaccard, score_cases, score_rules, BenchmarkRule, EvalError, MetricReport,
};
use semfuzz_core::message::ProtocolId;
use semfuzz_core::rules::{Role, RoleRule, SemanticRule};

fn rule(id: &str, mt: &str, field: &str, construction: &str) -> SemanticRule {
    SemanticRule {
        id: id.into(),
        protocol: ProtocolId::Tls13,
        message_type: mt.into(),
        field: field.into(),
        construction: RoleRule {
            role: Role::Client,
            content: construction.into(),
            inferred: false,
        },
        processing: RoleRule {
            role: Role::Server,
            content: "abort the handshake".into(),
            inferred: false,
        },
        provenance: None,
        testable: true,
        field_in_seed: true,
    }
}

fn bench(id: &str, r: SemanticRule) -> BenchmarkRule {
    BenchmarkRule {
        annotation_id: id.into(),
        rule: r,
    }
}

const CH: &str = "ClientHello with Pre Shared Key Extension";

#[test]
fn jaccard_by_hand() {
    // {client, sends, extension, once} against {client, sends, extension, exactly, once}
    assert!(
        (jaccard(
            "The client sends the extension once",
            "client sends extension exactly once"
        ) - 0.8)
            .abs()
            < 1e-12
    );
    // {psk, last} against {psk, first}: 1 shared of 3
    assert!((jaccard("psk is last", "psk is first") - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(jaccard("the of", "a an"), 1.0);
}

#[test]
fn scores_match_hand_counts() {
    let extracted = vec![
        rule(
            "R1",
            CH,
            "handshake.extensions[*].pre_shared_key",
            "pre_shared_key is the last extension",
        ),
        rule(
            "R2",
            "clienthello  with PRE shared key extension",
            "handshake.extensions[*].pre_shared_key",
            "pre_shared_key is the last extension",
        ),
        rule(
            "R3",
            CH,
            "handshake.legacy_version",
            "legacy_version is 0x0303",
        ),
        rule("R4", CH, "handshake.random", "random holds 32 fresh octets"),
    ];
    let benchmark = vec![
        bench(
            "A1",
            rule(
                "B1",
                CH,
                "handshake.extensions[*].pre_shared_key",
                "pre_shared_key must be the last extension",
            ),
        ),
        bench(
            "A2",
            rule(
                "B2",
                CH,
                "handshake.legacy_version",
                "legacy_version is set to 0x0303",
            ),
        ),
        bench(
            "A3",
            rule("B3", CH, "handshake.session_id", "session_id is 32 octets"),
        ),
    ];
    // R1-A1 and R3-A2 match; R2 would match A1 but A1 is taken; R4 has no field partner.
    let m = score_rules(&extracted, &benchmark, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (2, 2, 1));
    assert!((m.precision - 0.5).abs() < 1e-9);
    assert!((m.recall - 2.0 / 3.0).abs() < 1e-9);
    assert!((m.f1 - 4.0 / 7.0).abs() < 1e-9);
}

#[test]
fn threshold_gates_matches() {
    let e = vec![rule("R1", CH, "f", "psk is last")];
    let b = vec![bench("A1", rule("B1", CH, "f", "psk is first"))];
    assert_eq!(score_rules(&e, &b, 0.3).tp, 1);
    assert_eq!(score_rules(&e, &b, 0.5).tp, 0);
}

#[test]
fn protocol_must_match() {
    let e = vec![rule("R1", CH, "f", "psk is last")];
    let mut other = rule("B1", CH, "f", "psk is last");
    other.protocol = ProtocolId::Dns;
    assert_eq!(score_rules(&e, &[bench("A1", other)], 0.5).tp, 0);
}

#[test]
fn case_accuracy() {
    assert_eq!(score_cases(&[true, true, false, true]).unwrap(), 0.75);
    assert_eq!(score_cases(&[]), Err(EvalError::EmptyBatch));
}

proptest! {
    #[test]
    fn f1_is_the_harmonic_mean(tp in 0usize..500, fp in 0usize..500, fn_ in 0usize..500) {
        let m = MetricReport::from_counts(tp, fp, fn_);
        if m.precision + m.recall > 0.0 {
            let harmonic = 2.0 / (1.0 / m.precision + 1.0 / m.recall);
            prop_assert!((m.f1 - harmonic).abs() < 1e-9);
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
            prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
    }

    #[test]
    fn counts_partition_both_sides(n_ext in 0usize..8, n_bench in 0usize..8, overlap in 0usize..8) {
        let overlap = overlap.min(n_ext).min(n_bench);
        let extracted: Vec<SemanticRule> = (0..n_ext)
            .map(|i| rule(&format!("R{i}"), CH, &format!("f{}", if i < overlap { i } else { 100 + i }), "same words"))
            .collect();
        let benchmark: Vec<BenchmarkRule> = (0..n_bench)
            .map(|i| bench(&format!("A{i}"), rule(&format!("B{i}"), CH, &format!("f{}", if i < overlap { i } else { 200 + i }), "same words")))
            .collect();
        let m = score_rules(&extracted, &benchmark, 0.5);
        prop_assert_eq!(m.tp, overlap);
        prop_assert_eq!(m.tp + m.fp, n_ext);
        prop_assert_eq!(m.tp + m.fn_, n_bench);
    }

    #[test]
    fn accuracy_is_the_valid_share(flags in proptest::collection::vec(any::<bool>(), 1..200)) {
        let valid = flags.iter().filter(|v| **v).count();
        prop_assert!((score_cases(&flags).unwrap() - valid as f64 / flags.len() as f64).abs() < 1e-12);
    }
}
