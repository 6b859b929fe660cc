mod common;

use headsearch::hyperband::plan;

#[test]
fn plan_matches_recurrence_oracle() {
    for eta in [2u32, 3, 4] {
        for r in 1..=81u32 {
            let got: Vec<Vec<(usize, u32)>> = plan(r, eta)
                .unwrap()
                .brackets
                .iter()
                .map(|b| b.rounds.iter().map(|x| (x.configs, x.budget)).collect())
                .collect();
            assert_eq!(got, common::hyperband_oracle(r, eta), "R={r} eta={eta}");
        }
    }
}

#[test]
fn nine_by_three_brackets() {
    let p = plan(9, 3).unwrap();
    assert_eq!(common::describe_plan(&p), "(9@1→3@3→1@9), (5@3→1@9), (3@9)");
    assert_eq!(p.trial_count(), 22);
}

#[test]
fn full_search_records_every_trial() {
    let (trials, lines) = common::stub_search(9, 3, 5);
    assert_eq!(trials.len(), 22);
    assert_eq!(lines.len(), 22);
    let ids: Vec<u64> = trials.iter().map(|t| t.trial_id).collect();
    assert_eq!(ids, (0..22).collect::<Vec<_>>());
}
