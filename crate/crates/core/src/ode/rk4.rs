use super::{check_finite, InputSignal, IntegrationError, Side, VectorField};

#[inline]
fn axpy<const N: usize>(x: &[f64; N], a: f64, k: &[f64; N]) -> [f64; N] {
    let mut out = *x;
    for i in 0..N {
        out[i] += a * k[i];
    }
    out
}

/// One classical RK4 step from `(t, x)` with step `h`.
///
/// The input is sampled at `t`, `t + h/2` and (from the left) at `t + h`.
pub fn rk4_step<F, S, const NX: usize, const NU: usize>(
    field: &F,
    x: &[f64; NX],
    t: f64,
    h: f64,
    input: &S,
    p: &F::Params,
) -> Result<[f64; NX], IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    S: InputSignal<NU> + ?Sized,
{
    let tm = t + 0.5 * h;
    let te = t + h;
    let e1 = input.sample(t, Side::Right);
    let em = input.sample(tm, Side::Right);
    let e4 = input.sample(te, Side::Left);

    let k1 = field.eval(x, &e1.input, e1.disturbance, t, p);
    let k2 = field.eval(&axpy(x, 0.5 * h, &k1), &em.input, em.disturbance, tm, p);
    let k3 = field.eval(&axpy(x, 0.5 * h, &k2), &em.input, em.disturbance, tm, p);
    let k4 = field.eval(&axpy(x, h, &k3), &e4.input, e4.disturbance, te, p);

    let mut out = *x;
    let w = h / 6.0;
    for i in 0..NX {
        out[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    check_finite(te, &out)?;
    Ok(out)
}
