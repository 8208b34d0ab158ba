//! Tsitouras 5(4) tableau run at a fixed step. The embedded error estimate is
//! not used.

use super::{check_finite, integrate_flow, InputSignal, IntegrationError, IntegratorConfig, Side, Trajectory, VectorField};

const C: [f64; 6] = [0.161, 0.327, 0.9, 0.980_025_540_904_509_7, 1.0, 1.0];

const A21: f64 = 0.161;
const A31: f64 = -0.008_480_655_492_356_989;
const A32: f64 = 0.335_480_655_492_357;
const A41: f64 = 2.897_153_057_105_493;
const A42: f64 = -6.359_448_489_975_075;
const A43: f64 = 4.362_295_432_869_581_5;
const A51: f64 = 5.325_864_828_439_257;
const A52: f64 = -11.748_883_564_062_828;
const A53: f64 = 7.495_539_342_889_836_5;
const A54: f64 = -0.092_495_066_361_755_25;
const A61: f64 = 5.861_455_442_946_42;
const A62: f64 = -12.920_969_317_847_11;
const A63: f64 = 8.159_367_898_576_159;
const A64: f64 = -0.071_584_973_281_401;
const A65: f64 = -0.028_269_050_394_068_383;

const B: [f64; 6] = [
    0.096_460_766_818_065_23,
    0.01,
    0.479_889_650_414_499_6,
    1.379_008_574_103_742,
    -3.290_069_515_436_081,
    2.324_710_524_099_774,
];

#[inline]
fn combo<const N: usize>(x: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *x;
    for i in 0..N {
        let mut acc = 0.0;
        for (a, k) in terms {
            acc += a * k[i];
        }
        out[i] += h * acc;
    }
    out
}

pub fn tsit5_step<F, S, const NX: usize, const NU: usize>(
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
    let eval = |c: f64, y: &[f64; NX]| {
        let (ts, side) = if c == 1.0 { (t + h, Side::Left) } else { (t + c * h, Side::Right) };
        let e = input.sample(ts, side);
        field.eval(y, &e.input, e.disturbance, ts, p)
    };
    let k1 = eval(0.0, x);
    let k2 = eval(C[0], &combo(x, h, &[(A21, &k1)]));
    let k3 = eval(C[1], &combo(x, h, &[(A31, &k1), (A32, &k2)]));
    let k4 = eval(C[2], &combo(x, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
    let k5 = eval(C[3], &combo(x, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
    let k6 = eval(C[4], &combo(x, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
    let out = combo(x, h, &[(B[0], &k1), (B[1], &k2), (B[2], &k3), (B[3], &k4), (B[4], &k5), (B[5], &k6)]);
    check_finite(t + h, &out)?;
    Ok(out)
}

/// [`integrate_flow`] with the Tsitouras scheme at fixed step `h`.
#[allow(clippy::too_many_arguments)]
pub fn tsit54_integrate<F, S, const NX: usize, const NU: usize>(
    field: &F,
    p: &F::Params,
    x0: [f64; NX],
    input: &S,
    t0: f64,
    t1: f64,
    h: f64,
    record_at: &[f64],
) -> Result<Trajectory<NX>, IntegrationError>
where
    F: VectorField<NX, NU> + ?Sized,
    S: InputSignal<NU> + ?Sized,
{
    integrate_flow(field, p, x0, input, t0, t1, &IntegratorConfig::tsit5(h), record_at)
}
