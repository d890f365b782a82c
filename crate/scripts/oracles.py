"""Independent reference values frozen into the Rust test suites.

Run with `python3 scripts/oracles.py`. Uses exact rationals / mpmath so the
numbers do not share a code path with the Rust implementation.
"""
from fractions import Fraction as F
import mpmath as mp

mp.mp.dps = 50


def sigma(counts):
    m = len(counts)
    total = sum(counts)
    p = [F(c, total) for c in counts]
    num = sum(F(j * (j - 1), m * (m - 1)) * p[j - 1] for j in range(1, m + 1))
    den = sum(F(j, m) * p[j - 1] for j in range(1, m + 1))
    return 1 - num / den


def kappa(a, b, k):
    n = len(a)
    po = F(sum(1 for x, y in zip(a, b) if x == y), n)
    pe = sum(F(a.count(c), n) * F(b.count(c), n) for c in range(k))
    return (po - pe) / (1 - pe)


def ci95(bits):
    n = len(bits)
    mean = mp.mpf(sum(bits)) / n
    var = sum((mp.mpf(b) - mean) ** 2 for b in bits) / (n - 1)
    return 100 * mp.mpf("1.96") * mp.sqrt(var) / mp.sqrt(n)


def softmax(z):
    e = [mp.e ** mp.mpf(x) for x in z]
    s = sum(e)
    return [x / s for x in e]


def sig(x):
    return 1 / (1 + mp.e ** (-x))


def fixed_forward():
    # m=2 members, K=3, one hidden layer of width 4, softmax-normalized input
    rows = [[mp.mpf("1.5"), mp.mpf("-0.25"), mp.mpf("0.5")],
            [mp.mpf("0.0"), mp.mpf("2.0"), mp.mpf("-1.0")]]
    x = softmax(rows[0]) + softmax(rows[1])
    w1 = [[mp.mpf(v) for v in r] for r in [
        ["0.1", "-0.2", "0.3", "0.05", "-0.15", "0.25"],
        ["-0.3", "0.4", "0.1", "-0.05", "0.2", "0.0"],
        ["0.25", "0.25", "-0.5", "0.3", "0.1", "-0.2"],
        ["0.0", "-0.1", "0.2", "0.4", "-0.3", "0.15"]]]
    b1 = [mp.mpf(v) for v in ["0.01", "-0.02", "0.03", "0.0"]]
    w2 = [[mp.mpf(v) for v in r] for r in [
        ["0.5", "-0.4", "0.3", "0.2"],
        ["-0.1", "0.6", "-0.2", "0.1"],
        ["0.2", "0.1", "0.4", "-0.5"]]]
    b2 = [mp.mpf(v) for v in ["0.1", "0.0", "-0.1"]]
    h = [sig(sum(w * xi for w, xi in zip(r, x)) + b) for r, b in zip(w1, b1)]
    z = [sum(w * hi for w, hi in zip(r, h)) + b for r, b in zip(w2, b2)]
    return softmax(z)


if __name__ == "__main__":
    print("sigma m=2 n=[5,5]      ", sigma([5, 5]))
    print("sigma m=3 n=[4,3,2]    ", sigma([4, 3, 2]), float(sigma([4, 3, 2])))
    print("sigma m=4 n=[7,0,2,1]  ", sigma([7, 0, 2, 1]), float(sigma([7, 0, 2, 1])))
    print("kappa A=0011 B=0101    ", kappa([0, 0, 1, 1], [0, 1, 0, 1], 2))
    print("kappa 012201 vs 012210 ", kappa([0, 1, 2, 2, 0, 1], [0, 1, 2, 2, 1, 0], 3),
          float(kappa([0, 1, 2, 2, 0, 1], [0, 1, 2, 2, 1, 0], 3)))
    print("pruning 0.6/0.4        ", F(6, 10) * F(65, 100) + F(4, 10) * F(46, 100))
    print("ci95 300/300           ", mp.nstr(ci95([1] * 300 + [0] * 300), 20))
    print("ci95 1/3 of 9          ", mp.nstr(ci95([1] * 3 + [0] * 6), 20))
    print("softmax [ln2, 0]       ", [mp.nstr(v, 20) for v in softmax([mp.log(2), 0])])
    print("fixed forward          ", [mp.nstr(v, 25) for v in fixed_forward()])
    rows = [[0.12, 0.3, 0.08, 0.2, 0.3], [0.31, 0.09, 0.2, 0.2, 0.2], [0.05, 0.25, 0.4, 0.1, 0.2]]
    mean = [sum(F(r[c]).limit_denominator(10**6) for r in rows) / 3 for c in range(5)]
    print("simple mean rows       ", [float(v) for v in mean], "argmax", max(range(5), key=lambda c: (mean[c], -c)))
