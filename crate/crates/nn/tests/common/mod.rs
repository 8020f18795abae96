use tpo_nn::{Graph, ParamStore, Real, Var};

/// Largest violation of `|analytic - numeric| <= tol * max(|analytic|, |numeric|, floor)`
/// over every parameter entry, using central differences.
pub fn max_grad_violation(
    store: &ParamStore,
    step: Real,
    tol: Real,
    floor: Real,
    loss: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> Real {
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    let analytic = g.backward(l).params(&g, store);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(&mut g, s);
        g.value(l).item()
    };
    let mut worst: Real = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[j] = orig - step;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data()[j];
            let scale = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / (tol * scale));
        }
    }
    worst
}
