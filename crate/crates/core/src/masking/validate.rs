use serde::Serialize;

use super::{round_half_up, MaskPlan, Strategy};

/// One failed plan invariant with the indices that break it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: &'static str,
    pub indices: Vec<usize>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} {:?}", self.invariant, self.detail, self.indices)
    }
}

fn push(out: &mut Vec<Violation>, invariant: &'static str, indices: Vec<usize>, detail: impl Into<String>) {
    out.push(Violation {
        invariant,
        indices,
        detail: detail.into(),
    });
}

/// Every broken plan invariant; empty for a well-formed plan.
pub fn validate_plan(plan: &MaskPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let g = plan.grid;
    let n = g.len();

    if g.rows % 2 != 0 || g.cols % 2 != 0 || n == 0 {
        push(&mut out, "grid-even", vec![g.rows, g.cols], "grid extents must be even and non-zero");
        return out;
    }

    let out_of_range: Vec<usize> = plan
        .kept
        .iter()
        .chain(&plan.sm_masked)
        .copied()
        .filter(|&k| k >= n)
        .collect();
    if !out_of_range.is_empty() {
        push(&mut out, "index-range", out_of_range, format!("indices must be below {n}"));
    }

    let mut seen = vec![false; n];
    let mut dupes = Vec::new();
    for &k in plan.kept.iter().filter(|&&k| k < n) {
        if seen[k] {
            dupes.push(k);
        }
        seen[k] = true;
    }
    if !dupes.is_empty() {
        push(&mut out, "kept-unique", dupes, "kept indices repeat");
    }
    if plan.kept.windows(2).any(|w| w[0] > w[1]) {
        push(&mut out, "kept-order", vec![], "kept indices must be ascending");
    }
    if plan.kept.is_empty() {
        push(&mut out, "kept-count", vec![], "no patch is kept");
    }

    let keep = plan.kept_flags();
    let outside: Vec<usize> = plan
        .sm_masked
        .iter()
        .copied()
        .filter(|&k| k < n && !keep[k])
        .collect();
    if !outside.is_empty() {
        push(&mut out, "sm-subset", outside, "secondary-masked patches must be kept");
    }

    if plan.strategy.one_per_cell() {
        if plan.kept.len() != n / 4 {
            push(
                &mut out,
                "kept-count",
                vec![plan.kept.len()],
                format!("{} plans keep exactly {} patches", plan.strategy, n / 4),
            );
        }
        for i in 0..g.compact_rows() {
            for j in 0..g.compact_cols() {
                let hits: Vec<usize> = g
                    .cell_members(i, j)
                    .into_iter()
                    .filter(|&m| keep[m])
                    .collect();
                if hits.len() != 1 {
                    push(
                        &mut out,
                        "cell-uniqueness",
                        hits.clone(),
                        format!("cell ({i}, {j}) holds {} kept patches", hits.len()),
                    );
                }
            }
        }
    }

    if plan.strategy == Strategy::Gs {
        let off: Vec<usize> = plan
            .kept
            .iter()
            .copied()
            .filter(|&k| k < n && g.cell_members(g.coords(k).0 / 2, g.coords(k).1 / 2)[0] != k)
            .collect();
        if !off.is_empty() {
            push(&mut out, "gs-corner", off, "grid sampling keeps top-left corners only");
        }
    }

    if plan.strategy == Strategy::Um {
        if !(0.0..1.0).contains(&plan.sm_ratio) {
            push(&mut out, "sm-ratio-range", vec![], format!("sm ratio {} outside [0, 1)", plan.sm_ratio));
        }
        let want = round_half_up(plan.sm_ratio * plan.kept.len() as f64);
        if plan.sm_masked.len() != want {
            push(
                &mut out,
                "sm-count",
                vec![plan.sm_masked.len()],
                format!("expected {want} secondary-masked patches"),
            );
        }
    } else if !plan.sm_masked.is_empty() {
        push(
            &mut out,
            "sm-empty",
            plan.sm_masked.clone(),
            format!("{} plans carry no secondary mask", plan.strategy),
        );
    }
    out
}
