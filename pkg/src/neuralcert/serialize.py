"""Text serialization for networks and certificate specs.

Everything is a line-oriented document with space-separated tokens and
floats printed at 17 significant digits, which round-trips IEEE doubles
exactly. Reruns with the same parameters therefore produce byte-identical
files, which the command layer's determinism contract leans on.

QP policy objects are not stored: they are rebuilt from the run config
and the system at load time. The tracking controller of a contraction
spec is pure network, so it round-trips here.
"""

import numpy as np

from .certificates import (CertificateSpec, MetricCertificate,
                           NormSquaredCertificate, QuadraticCertificate,
                           ScalarCertificate, FeatureMap)
from .controllers import TrackingController
from .diff.mlp import Mlp

FORMAT_TAG = "neuralcert-spec 1"


def fmt(v):
    return format(float(v), ".17g")


def _vec(values):
    return " ".join(fmt(v) for v in np.asarray(values, dtype=np.float64).ravel())


def _parse_vec(tokens):
    return np.array([float(t) for t in tokens], dtype=np.float64)


# -- networks -----------------------------------------------------------------------


def network_lines(net):
    lines = [f"net activation {net.activation}",
             "widths " + " ".join(str(w) for w in net.widths)]
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{k} " + _vec(W))
        lines.append(f"b{k} " + _vec(b))
    return lines


def parse_network(lines, i):
    """Read a network block starting at lines[i]; returns (net, next index)."""
    head = lines[i].split()
    if head[:2] != ["net", "activation"]:
        raise ValueError(f"expected a network block at line {i + 1}")
    activation = head[2]
    widths = tuple(int(t) for t in lines[i + 1].split()[1:])
    i += 2
    weights, biases = [], []
    for k in range(len(widths) - 1):
        wtok = lines[i].split()
        btok = lines[i + 1].split()
        if wtok[0] != f"W{k}" or btok[0] != f"b{k}":
            raise ValueError(f"malformed layer {k} near line {i + 1}")
        weights.append(_parse_vec(wtok[1:]).reshape(widths[k], widths[k + 1]))
        biases.append(_parse_vec(btok[1:]))
        i += 2
    return Mlp(widths, activation, weights=weights, biases=biases), i


def save_network(net, path):
    with open(path, "w") as fh:
        fh.write("\n".join(network_lines(net)) + "\n")


def load_network(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    net, _ = parse_network(lines, 0)
    return net


# -- feature maps ---------------------------------------------------------------------


def _features_line(fm):
    out = f"features dim {fm.dim} angular"
    for d in fm.angular_dims:
        out += f" {d}"
    return out


def _parse_features(line):
    tok = line.split()
    if tok[:2] != ["features", "dim"] or tok[3] != "angular":
        raise ValueError(f"malformed feature line: {line!r}")
    return FeatureMap(int(tok[2]), tuple(int(t) for t in tok[4:]))


# -- certificate blocks ------------------------------------------------------------------


def _certificate_lines(cert):
    if isinstance(cert, NormSquaredCertificate):
        return (["certificate norm_squared", "goal " + _vec(cert.goal),
                 _features_line(cert.features)] + network_lines(cert.net))
    if isinstance(cert, ScalarCertificate):
        return (["certificate scalar", _features_line(cert.features)]
                + network_lines(cert.net))
    if isinstance(cert, QuadraticCertificate):
        return ["certificate quadratic", f"dim {cert.P.shape[0]}",
                "P " + _vec(cert.P), "goal " + _vec(cert.goal)]
    if isinstance(cert, MetricCertificate):
        return ([f"certificate metric", f"dim {cert.state_dim}",
                 "shift " + fmt(cert.shift), _features_line(cert.features)]
                + network_lines(cert.net))
    raise ValueError(f"cannot serialize certificate type {type(cert).__name__}")


def _parse_certificate(lines, i):
    kind = lines[i].split()[1]
    i += 1
    if kind == "norm_squared":
        goal = _parse_vec(lines[i].split()[1:])
        fm = _parse_features(lines[i + 1])
        net, i = parse_network(lines, i + 2)
        return NormSquaredCertificate(net, goal=goal, features=fm), i
    if kind == "scalar":
        fm = _parse_features(lines[i])
        net, i = parse_network(lines, i + 1)
        return ScalarCertificate(net, features=fm), i
    if kind == "quadratic":
        dim = int(lines[i].split()[1])
        P = _parse_vec(lines[i + 1].split()[1:]).reshape(dim, dim)
        goal = _parse_vec(lines[i + 2].split()[1:])
        return QuadraticCertificate(P, goal=goal), i + 3
    if kind == "metric":
        dim = int(lines[i].split()[1])
        shift = float(lines[i + 1].split()[1])
        fm = _parse_features(lines[i + 2])
        net, i = parse_network(lines, i + 3)
        return MetricCertificate(net, dim, features=fm, shift=shift), i
    raise ValueError(f"unknown certificate block {kind!r}")


# -- whole specs ---------------------------------------------------------------------------


def dump_spec(spec):
    lines = [FORMAT_TAG,
             f"kind {spec.kind}",
             "rate " + fmt(spec.rate),
             "dt " + fmt(spec.dt),
             "m_lo " + fmt(spec.m_lo),
             "m_hi " + fmt(spec.m_hi),
             "eps_nd " + fmt(spec.eps_nd)]
    for name in sorted(spec.weights):
        lines.append(f"weight {name} " + fmt(spec.weights[name]))
    lines += _certificate_lines(spec.certificate)
    if isinstance(spec.policy, TrackingController):
        lines.append("policy tracking")
        lines.append(f"state_dim {spec.policy.state_dim}")
        lines.append(_features_line(spec.policy.features))
        lines += network_lines(spec.policy.net)
    else:
        lines.append("policy none")
    return "\n".join(lines) + "\n"


def parse_spec(text):
    lines = [ln.rstrip() for ln in text.split("\n") if ln.strip()]
    if lines[0] != FORMAT_TAG:
        raise ValueError("not a certificate spec document")
    fields = {}
    i = 1
    weights = {}
    while i < len(lines) and not lines[i].startswith("certificate"):
        tok = lines[i].split()
        if tok[0] == "weight":
            weights[tok[1]] = float(tok[2])
        else:
            fields[tok[0]] = tok[1]
        i += 1
    cert, i = _parse_certificate(lines, i)
    policy = None
    if i < len(lines):
        tag = lines[i].split()
        if tag[0] != "policy":
            raise ValueError(f"expected a policy block at line {i + 1}")
        if tag[1] == "tracking":
            state_dim = int(lines[i + 1].split()[1])
            fm = _parse_features(lines[i + 2])
            net, i = parse_network(lines, i + 3)
            policy = TrackingController(net, fm, state_dim=state_dim)
        elif tag[1] != "none":
            raise ValueError(f"unknown policy block {tag[1]!r}")
    return CertificateSpec(
        fields["kind"], cert, float(fields["rate"]), weights=weights,
        dt=float(fields["dt"]), policy=policy, m_lo=float(fields["m_lo"]),
        m_hi=float(fields["m_hi"]), eps_nd=float(fields["eps_nd"]))


def save_spec(spec, path):
    with open(path, "w") as fh:
        fh.write(dump_spec(spec))


def load_spec(path):
    with open(path) as fh:
        return parse_spec(fh.read())
