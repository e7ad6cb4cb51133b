//! Exact discrete optimal-transport kernels backing the Wasserstein-1
//! distance. Three routes, all exact:
//!
//! * dimension 1: CDF coupling over the merged sorted supports,
//! * equal-size uniform-weight supports: optimal assignment by shortest
//!   augmenting paths,
//! * general weighted atoms: transportation simplex on the bipartite
//!   atom graph.
//!
//! No entropic or sliced approximations anywhere.

/// W1 on the line between two weighted atom lists. `mu` and `nu` must each
/// be sorted by position with weights summing to one. Exact for arbitrary
/// support sizes: integrates |F_mu - F_nu| between consecutive breakpoints.
pub(crate) fn w1_sorted_1d(mu: &[(f64, f64)], nu: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0usize, 0usize);
    let (mut f_mu, mut f_nu) = (0.0f64, 0.0f64);
    let mut last_x = f64::NAN;
    let mut total = 0.0;
    while i < mu.len() || j < nu.len() {
        let x = match (mu.get(i), nu.get(j)) {
            (Some(&(a, _)), Some(&(b, _))) => a.min(b),
            (Some(&(a, _)), None) => a,
            (None, Some(&(b, _))) => b,
            (None, None) => unreachable!(),
        };
        if last_x.is_finite() {
            total += (x - last_x) * (f_mu - f_nu).abs();
        }
        while i < mu.len() && mu[i].0 == x {
            f_mu += mu[i].1;
            i += 1;
        }
        while j < nu.len() && nu[j].0 == x {
            f_nu += nu[j].1;
            j += 1;
        }
        last_x = x;
    }
    total
}

/// Minimum-cost perfect matching on an n x n cost matrix by the classic
/// shortest-augmenting-path scheme with dual potentials. O(n^3), exact,
/// deterministic. Returns the summed cost of the optimal assignment.
pub(crate) fn assignment_min_cost(n: usize, cost: &[f64]) -> f64 {
    debug_assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    // 1-based arrays; p[j] is the row matched to column j, p[0] scratch.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the alternating path found above.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[(p[j] - 1) * n + (j - 1)]).sum()
}

struct BasisArc {
    i: usize,
    j: usize,
    flow: f64,
}

/// Exact balanced transportation problem: minimize sum f_ij c_ij over
/// nonnegative flows with row sums `a` and column sums `b`. Solved by the
/// transportation simplex on a spanning-tree basis; Dantzig pricing with a
/// Bland fallback guards against degenerate cycling. Supplies must be
/// positive and balanced to within roundoff.
pub(crate) fn transport_min_cost(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let n = a.len();
    let m = b.len();
    debug_assert_eq!(cost.len(), n * m);
    if n == 0 || m == 0 {
        return 0.0;
    }

    // Absorb the (tiny) supply/demand imbalance into the last sink so the
    // northwest-corner start is exactly feasible.
    let mut ar: Vec<f64> = a.to_vec();
    let mut br: Vec<f64> = b.to_vec();
    let imbalance: f64 = ar.iter().sum::<f64>() - br.iter().sum::<f64>();
    br[m - 1] = (br[m - 1] + imbalance).max(0.0);

    // Northwest-corner initial basis: exactly n+m-1 arcs forming a tree,
    // zero-flow arcs included on degenerate ties.
    let mut basis: Vec<BasisArc> = Vec::with_capacity(n + m - 1);
    let mut in_basis = vec![false; n * m];
    {
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let f = ar[i].min(br[j]);
            basis.push(BasisArc { i, j, flow: f });
            in_basis[i * m + j] = true;
            ar[i] -= f;
            br[j] -= f;
            if basis.len() == n + m - 1 {
                break;
            }
            if ar[i] > 0.0 || i == n - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }

    let scale = cost.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale;
    let dantzig_cap = 40 * (n + m) + 200;
    let mut pivots = 0usize;

    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m];
    // Node indices: sources 0..n, sinks n..n+m.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + m];

    loop {
        // Duals from the basis tree: u[0] = 0, propagate c = u + v.
        for lists in adj.iter_mut() {
            lists.clear();
        }
        for (k, arc) in basis.iter().enumerate() {
            adj[arc.i].push((k, n + arc.j));
            adj[n + arc.j].push((k, arc.i));
        }
        let mut seen = vec![false; n + m];
        let mut stack = vec![0usize];
        seen[0] = true;
        u[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &(k, other) in &adj[node] {
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                let arc = &basis[k];
                if other >= n {
                    v[arc.j] = cost[arc.i * m + arc.j] - u[arc.i];
                } else {
                    u[arc.i] = cost[arc.i * m + arc.j] - v[arc.j];
                }
                stack.push(other);
            }
        }

        // Price out a non-basic arc. Dantzig (most negative reduced cost)
        // until the pivot cap, then Bland (first negative) which cannot
        // cycle.
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if in_basis[i * m + j] {
                    continue;
                }
                let r = cost[i * m + j] - u[i] - v[j];
                if r < best {
                    best = r;
                    enter = Some((i, j));
                    if pivots >= dantzig_cap {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej)) = enter else {
            return basis
                .iter()
                .map(|arc| arc.flow * cost[arc.i * m + arc.j])
                .sum();
        };

        // Unique tree path from sink ej back to source ei; together with
        // the entering arc it closes the pivot cycle.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
        let mut seen = vec![false; n + m];
        let start = n + ej;
        let goal = ei;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            if node == goal {
                break;
            }
            for &(k, other) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((k, node));
                    stack.push(other);
                }
            }
        }
        let mut path_arcs: Vec<usize> = Vec::new();
        let mut node = goal;
        while node != start {
            let (k, prev) = parent[node].expect("basis tree is connected");
            path_arcs.push(k);
            node = prev;
        }
        // Walking the cycle from the entering arc, signs alternate: odd
        // positions along the path give up flow.
        let mut delta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (pos, &k) in path_arcs.iter().enumerate() {
            if pos % 2 == 0 {
                let arc = &basis[k];
                let better = arc.flow < delta
                    || (arc.flow == delta
                        && leave.is_some_and(|l| {
                            (arc.i, arc.j) < (basis[l].i, basis[l].j)
                        }));
                if better {
                    delta = arc.flow;
                    leave = Some(k);
                }
            }
        }
        let leave = leave.expect("pivot cycle has a leaving arc");
        for (pos, &k) in path_arcs.iter().enumerate() {
            if pos % 2 == 0 {
                basis[k].flow -= delta;
            } else {
                basis[k].flow += delta;
            }
        }
        in_basis[basis[leave].i * m + basis[leave].j] = false;
        in_basis[ei * m + ej] = true;
        basis[leave] = BasisArc {
            i: ei,
            j: ej,
            flow: delta,
        };
        pivots += 1;
    }
}
