"""
Local and central roles of the distributed inference protocol.

Node 0 holds the inference-only holdout; nodes 1..K run the Lasso.  All data
that crosses a role boundary travels as a :class:`WireMessage` through a
:class:`Channel`, which by default serializes every message to its canonical
frame and decodes it again on the receiving side.

Exchange numbering: exchange 0 is the selection report (every node sends its
selected set and sample size).  Under the union rule the protocol then needs
two exchanges: the model broadcast and the local summaries.  Under the
grouped rule some selected predictors fall outside the final model, so two
more follow: the central MLE is broadcast and each node returns the residual
score on the dropped predictors together with information blocks over them.
"""

import contextlib
import contextvars
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from ..engine import (
    LocalSummary,
    assemble_matrices,
    infer,
    selective_fisher,
    selective_mle,
    solve_selection_opt,
)
from ..errors import DistSIError, EmptyModelError, InvalidInputError, ProtocolError
from ..glm import Dataset, FamilySpec, GlmFit, aggregate_mle, fit_glm, mean_function, obs_fisher
from ..lasso import PenaltySpec, lasso_gradient, extract_selection, solve_weighted_lasso
from .wire import WireMessage, decode, encode

_ROLE = contextvars.ContextVar("distsi_role", default=None)


@contextlib.contextmanager
def acting_as(role: str):
    token = _ROLE.set(role)
    try:
        yield
    finally:
        _ROLE.reset(token)


def current_role():
    return _ROLE.get()


@dataclass(frozen=True)
class AggregationRule:
    kind: str = "union"
    groups: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("union", "grouped"):
            raise InvalidInputError(f"unknown aggregation rule {self.kind!r}")
        if self.kind == "grouped":
            if not self.groups:
                raise InvalidInputError("grouped aggregation needs a partition of the predictors")
            groups = tuple(tuple(sorted(int(j) for j in g)) for g in self.groups)
            flat = sorted(j for g in groups for j in g)
            if any(len(g) == 0 for g in groups) or flat != list(range(len(flat))):
                raise InvalidInputError("groups must partition 0..p-1")
            object.__setattr__(self, "groups", groups)

    @classmethod
    def contiguous(cls, p: int, size: int, seed: int = 0):
        return cls("grouped", tuple(tuple(range(a, min(a + size, p))) for a in range(0, p, size)), seed)

    @property
    def general(self):
        return self.kind != "union"


def aggregate_models(sets: Sequence, rule: AggregationRule = AggregationRule()):
    sets = [np.asarray(s, dtype=int) for s in sets]
    if not sets or all(s.size == 0 for s in sets):
        raise EmptyModelError("no node selected any predictor")
    selected = np.unique(np.concatenate(sets))
    if rule.kind == "union":
        return selected
    owner = {j: g for g, members in enumerate(rule.groups) for j in members}
    if selected.max() >= len(owner):
        raise InvalidInputError("selected predictor outside the grouped partition")
    touched = sorted({owner[int(j)] for j in selected})
    rng = np.random.default_rng(rule.seed)
    picks = [rule.groups[g][int(rng.integers(len(rule.groups[g])))] for g in touched]
    return np.array(sorted(picks), dtype=int)


@dataclass(frozen=True)
class TranscriptEntry:
    exchange: int
    sender: str
    receiver: str
    kind: str
    node_id: int
    nbytes: int


class Channel:
    """In-process transport that records every message."""

    def __init__(self, serialize: bool = True):
        self.serialize = serialize
        self.entries: List[TranscriptEntry] = []
        self.frames: List[bytes] = []

    def deliver(self, exchange, sender, receiver, msg: WireMessage) -> WireMessage:
        nbytes = 0
        if self.serialize:
            raw = encode(msg)
            self.frames.append(raw)
            nbytes = len(raw)
            msg = decode(raw)
        self.entries.append(TranscriptEntry(exchange, sender, receiver, msg.kind, msg.node_id, nbytes))
        return msg

    @property
    def n_exchanges(self):
        return len({e.exchange for e in self.entries if e.exchange > 0})

    def bytes_of(self, kind, node_id=None):
        return [e.nbytes for e in self.entries if e.kind == kind and (node_id is None or e.node_id == node_id)]


def _unit(family: FamilySpec):
    return FamilySpec(family.kind)


def _attribute(exc: DistSIError, node_id: int):
    exc.node_id = node_id
    if exc.args and not str(exc.args[0]).startswith("node "):
        exc.args = (f"node {node_id}: {exc.args[0]}",) + exc.args[1:]
    return exc


class LocalNode:
    """Holds one node's raw data; only code acting as that node may read it."""

    def __init__(self, data: Dataset, family: FamilySpec, penalty: Optional[PenaltySpec], n_total: int):
        self._data = data.check_family(family)
        self.node_id = data.node_id
        self.family = family
        self.penalty = penalty
        self.n_total = n_total
        self.reads = {}
        self._E_k = np.zeros(0, dtype=int)
        self._beta_lasso = None
        self._selection = None
        self._E = None
        self._F = None

    @property
    def data(self) -> Dataset:
        role = current_role()
        self.reads[role] = self.reads.get(role, 0) + 1
        if role != f"node:{self.node_id}" and not (role == "central" and self.node_id == 0):
            raise ProtocolError(f"role {role!r} attempted to read raw data of node {self.node_id}")
        return self._data

    def _run(self, fn, *args):
        with acting_as(f"node:{self.node_id}"):
            try:
                return fn(*args)
            except DistSIError as exc:
                raise _attribute(exc, self.node_id)

    def report_selection(self) -> WireMessage:
        return self._run(self._report_selection)

    def _report_selection(self):
        data = self.data
        if self.node_id > 0:
            beta = solve_weighted_lasso(data, self.penalty, _unit(self.family), self.n_total)
            grad = lasso_gradient(data, _unit(self.family), self.n_total, beta)
            self._selection = extract_selection(beta, grad, self.penalty)
            self._E_k = self._selection.E
        return WireMessage("SelectedSet", self.node_id, {"n": data.n, "E_k": self._E_k})

    def summarize(self, broadcast: WireMessage) -> WireMessage:
        return self._run(self._summarize, broadcast)

    def _summarize(self, broadcast):
        data, fam = self.data, _unit(self.family)
        E = broadcast["E"]
        E_u = broadcast.get("E_u")
        F = E if E_u is None else np.union1d(E, E_u)
        self._E, self._F = E, F
        fit = fit_glm(data.X[:, E], data.y, fam)
        sel = self._selection
        if sel is None:
            B, support, gamma = np.zeros(0), np.zeros(0, dtype=int), np.zeros(0)
        else:
            B, support, gamma = sel.B, F, sel.gamma[F]
        payload = {
            "n": data.n, "E_k": self._E_k, "B": B, "beta_E": fit.beta,
            "info": fit.obs_fi, "support": support, "gamma": gamma,
        }
        if self.family.is_gaussian and self.family.dispersion_mode == "estimate":
            payload["yty"] = float(data.y @ data.y)
            payload["xty"] = data.X[:, E].T @ data.y
        return WireMessage("LocalSummary", self.node_id, payload)

    def compensate(self, mle: WireMessage) -> WireMessage:
        return self._run(self._compensate, mle)

    def _compensate(self, mle):
        data, fam = self.data, _unit(self.family)
        E, F = self._E, self._F
        beta_F = np.zeros(F.size)
        posF = {int(j): i for i, j in enumerate(F)}
        beta_F[[posF[int(j)] for j in E]] = mle["beta_E"]
        rest = np.setdiff1d(F, E)
        resid = mean_function(fam, data.X[:, E] @ mle["beta_E"]) - data.y
        return WireMessage("ResidualCompensation", self.node_id, {
            "index": rest,
            "score_sum": data.X[:, rest].T @ resid,
            "info_index": F,
            "info": obs_fisher(data.X[:, F], beta_F, fam),
        })


@dataclass
class ProtocolResult:
    report: object
    E: np.ndarray
    E_sets: list
    beta_E: np.ndarray
    I_hat: np.ndarray
    dispersion: float
    rho: np.ndarray
    bundle: object
    opt: object
    channel: Channel = field(repr=False)

    @property
    def transcript(self):
        return self.channel.entries

    @property
    def n_exchanges(self):
        return self.channel.n_exchanges


def _penalty_list(penalties, K):
    if isinstance(penalties, PenaltySpec):
        return [penalties] * K
    penalties = list(penalties)
    if len(penalties) != K:
        raise InvalidInputError(f"need {K} penalties, got {len(penalties)}")
    return penalties


def central_inference(family, alpha, E, sizes, summaries, rule_general, comps=None):
    """Everything the central node computes from received messages.

    ``sizes`` and ``summaries`` are indexed by node id 0..K; ``comps`` are the
    residual compensation messages under the general rule.
    """
    n = int(sum(sizes))
    rho = np.asarray(sizes, dtype=float) / n
    rho = rho / rho.sum()
    fits = [GlmFit(s["beta_E"], s["info"]) for s in summaries]
    beta_E, I_unit = aggregate_mle(fits, rho)
    d = E.size
    if family.is_gaussian and family.dispersion_mode == "estimate":
        if n <= d:
            raise InvalidInputError("not enough samples to estimate the dispersion")
        yty = sum(s["yty"] for s in summaries)
        xty = sum(s["xty"] for s in summaries)
        rss = yty - 2.0 * beta_E @ xty + n * beta_E @ I_unit @ beta_E
        disp = max(float(rss), 0.0) / (n - d)
        if not disp > 0:
            raise InvalidInputError("estimated dispersion is zero")
    else:
        disp = family.dispersion
    locals_ = []
    for s in summaries[1:]:
        locals_.append(LocalSummary(
            node_id=s.node_id, n=s["n"], E_k=s["E_k"], B=s["B"], beta_E=s["beta_E"],
            info=s["info"], support=s["support"], gamma=s["gamma"] / disp,
        ))
    if rule_general:
        F = comps[0]["info_index"]
        info_F = sum(r * c["info"] for r, c in zip(rho, comps))
        posF = {int(j): i for i, j in enumerate(F)}
        pE = np.array([posF[int(j)] for j in E])
        info_F[np.ix_(pE, pE)] = I_unit
        rest = comps[0]["index"]
        comp = np.zeros(F.size)
        if rest.size:
            comp[[posF[int(j)] for j in rest]] = sum(c["score_sum"] for c in comps) / np.sqrt(n)
        bundle = assemble_matrices(locals_, info_F / disp, rho, E, compensation=comp / disp, info_index=F)
    else:
        bundle = assemble_matrices(locals_, I_unit / disp, rho, E)
    I_hat = I_unit / disp
    B_init = np.concatenate([s.B for s in locals_])
    opt = solve_selection_opt(bundle, beta_E, n, B_init)
    beta_sel = selective_mle(bundle, beta_E, opt, n, I_hat)
    fisher = selective_fisher(bundle, opt, I_hat)
    report = infer(beta_sel, fisher, n, alpha, coef=E, method="dist-si")
    return report, beta_E, I_hat, disp, rho, bundle, opt


def run_protocol(
    node_data: Sequence[Dataset],
    family: FamilySpec,
    penalties: Union[PenaltySpec, Sequence[PenaltySpec]],
    rule: AggregationRule = AggregationRule(),
    alpha: float = 0.1,
    *,
    serialize: bool = True,
) -> ProtocolResult:
    """Run selection, aggregation, summary exchange and central inference.

    ``node_data[0]`` is the holdout; the remaining entries are the selecting
    nodes.  Node ids are taken from position in the list.
    """
    if len(node_data) < 2:
        raise InvalidInputError("need a holdout and at least one selecting node")
    node_data = [d if d.node_id == i else Dataset(d.X, d.y, i) for i, d in enumerate(node_data)]
    p = node_data[0].p
    if any(d.p != p for d in node_data):
        raise InvalidInputError("nodes disagree on the number of predictors")
    K = len(node_data) - 1
    pens = [None] + _penalty_list(penalties, K)
    n_total = sum(d.n for d in node_data)
    nodes = [LocalNode(d, family, pen, n_total) for d, pen in zip(node_data, pens)]
    ch = Channel(serialize)

    with acting_as("central"):
        reports = [ch.deliver(0, f"node:{nd.node_id}", "central", nd.report_selection()) for nd in nodes]
        sizes = [m["n"] for m in reports]
        E_sets = [m["E_k"] for m in reports[1:]]
        E = aggregate_models(E_sets, rule)
        payload = {"E": E}
        if rule.general:
            payload["E_u"] = np.unique(np.concatenate(E_sets))
        bcast = WireMessage("ModelBroadcast", 0, payload)
        summaries = [
            ch.deliver(2, f"node:{nd.node_id}", "central",
                       nd.summarize(ch.deliver(1, "central", f"node:{nd.node_id}", bcast)))
            for nd in nodes
        ]
        comps = None
        if rule.general:
            beta_E_bc, _ = aggregate_mle(
                [GlmFit(s["beta_E"], s["info"]) for s in summaries],
                np.asarray(sizes, float) / n_total,
            )
            mle = WireMessage("MleBroadcast", 0, {"beta_E": beta_E_bc})
            comps = [
                ch.deliver(4, f"node:{nd.node_id}", "central",
                           nd.compensate(ch.deliver(3, "central", f"node:{nd.node_id}", mle)))
                for nd in nodes
            ]
        report, beta_E, I_hat, disp, rho, bundle, opt = central_inference(
            family, alpha, E, sizes, summaries, rule.general, comps
        )
    return ProtocolResult(report, E, E_sets, beta_E, I_hat, disp, rho, bundle, opt, ch)
