"""Policy conflict resolution with the Analytical Hierarchy Process.

The goal node selects one of two conflicting policies. Criteria are the
specificity of subject, object and environment; sub-criteria are the
element attributes. A leaf compares the two policies on whether each one
constrains that attribute.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from errors import InvalidHierarchy, MissingLocalPriority, NonConvergence, UnknownAttribute
from policies import ELEMENT_ATTRIBUTES, ELEMENTS

log = logging.getLogger(__name__)

EXTREME_PREFERENCE = 9
RANDOM_INDEX = {1: 0.00, 2: 0.00, 3: 0.58, 4: 0.90, 5: 1.12,
                6: 1.24, 7: 1.32, 8: 1.41, 9: 1.45, 10: 1.49}
CONSISTENCY_LIMIT = 0.1
TIE_TOLERANCE = 1e-12
WEIGHT_TOLERANCE = 1e-9


def comparison_matrix_for_attribute(p1, p2, element, attribute):
    """2x2 reciprocal matrix: the policy naming the attribute is strongly preferred."""
    if attribute not in ELEMENT_ATTRIBUTES.get(element, ()):
        raise UnknownAttribute(f'{element} has no attribute {attribute!r}')
    return _presence_matrix(p1.contains(element, attribute), p2.contains(element, attribute))


def comparison_matrix_for_element(p1, p2, element):
    """Used for criteria without sub-criteria: does the policy constrain the element at all."""
    if element not in ELEMENTS:
        raise UnknownAttribute(f'unknown element {element!r}')
    return _presence_matrix(bool(p1.attributes(element)), bool(p2.attributes(element)))


def _presence_matrix(first, second):
    m = np.ones((2, 2))
    if first and not second:
        m[0, 1], m[1, 0] = EXTREME_PREFERENCE, 1 / EXTREME_PREFERENCE
    elif second and not first:
        m[0, 1], m[1, 0] = 1 / EXTREME_PREFERENCE, EXTREME_PREFERENCE
    return m


def principal_priorities(m, tol=1e-10, max_iter=10_000):
    """Normalized principal eigenvector by power iteration."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise InvalidHierarchy(f'comparison matrix must be square, got shape {m.shape}')
    if not np.all(m > 0):
        raise InvalidHierarchy('comparison matrix entries must be positive')
    n = m.shape[0]
    w = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = m @ w
        nxt = nxt / nxt.sum()
        if np.max(np.abs(nxt - w)) < tol:
            return nxt
        w = nxt
    raise NonConvergence(f'power iteration did not converge within {max_iter} iterations')


def consistency_ratio(m, priorities):
    """Return (lambda_max, CI, CR) for a comparison matrix and its priorities."""
    m = np.asarray(m, dtype=float)
    w = np.asarray(priorities, dtype=float)
    n = m.shape[0]
    if n <= 2:
        return float(n), 0.0, 0.0
    lambda_max = float(np.mean((m @ w) / w))
    ci = (lambda_max - n) / (n - 1)
    ri = RANDOM_INDEX.get(n, 1.49)
    return lambda_max, ci, ci / ri


# ---------------------------------------------------------------------------
# Hierarchy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AhpHierarchy:
    criteria: tuple                                  # ((element, weight), ...)
    subcriteria: dict = field(default_factory=dict)  # element -> ((attribute, weight), ...)
    goal: str = 'select the policy'
    consistency: dict = field(default_factory=dict)  # matrix name -> CR

    def __post_init__(self):
        _check_weights('criteria', self.criteria)
        names = [name for name, _ in self.criteria]
        if len(names) != len(set(names)):
            raise InvalidHierarchy('duplicate criteria')
        for name in names:
            if name not in ELEMENTS:
                raise InvalidHierarchy(f'unknown criterion {name!r}')
        for element, subs in self.subcriteria.items():
            if element not in names:
                raise InvalidHierarchy(f'sub-criteria for undeclared criterion {element!r}')
            if not subs:
                continue
            _check_weights(f'{element} sub-criteria', subs)
            for attribute, _ in subs:
                if attribute not in ELEMENT_ATTRIBUTES[element]:
                    raise UnknownAttribute(f'{element} has no attribute {attribute!r}')

    def leaves(self):
        """(element, attribute or None, criterion weight, sub-criterion weight) in order."""
        for element, weight in self.criteria:
            subs = self.subcriteria.get(element)
            if subs:
                for attribute, sub_weight in subs:
                    yield element, attribute, weight, sub_weight
            else:
                yield element, None, weight, 1.0

    def to_dict(self):
        return {
            'goal': self.goal,
            'criteria': {name: weight for name, weight in self.criteria},
            'subcriteria': {element: {a: w for a, w in subs} for element, subs in self.subcriteria.items()},
            'consistency': dict(self.consistency),
        }


def _check_weights(what, pairs):
    weights = [w for _, w in pairs]
    if not weights or any(w <= 0 for w in weights):
        raise InvalidHierarchy(f'{what}: weights must be positive')
    if abs(sum(weights) - 1.0) > WEIGHT_TOLERANCE:
        raise InvalidHierarchy(f'{what}: weights sum to {sum(weights)}, not 1')


def weights_from_judgements(names, judgements, label='judgements'):
    """Build the reciprocal matrix from dominance statements and derive weights.

    Each judgement is ``{"more": a, "less": b, "intensity": 1..9}``; pairs that
    are not mentioned count as equally important.
    """
    index = {name: i for i, name in enumerate(names)}
    m = np.ones((len(names), len(names)))
    for j in judgements:
        try:
            a, b, intensity = j['more'], j['less'], j.get('intensity', 1)
        except (KeyError, TypeError):
            raise InvalidHierarchy(f'{label}: judgement needs "more" and "less"') from None
        if a not in index or b not in index or a == b:
            raise InvalidHierarchy(f'{label}: bad pair {a!r} / {b!r}')
        if not isinstance(intensity, int) or isinstance(intensity, bool) or not 1 <= intensity <= 9:
            raise InvalidHierarchy(f'{label}: intensity must be an integer from 1 to 9')
        m[index[a], index[b]], m[index[b], index[a]] = intensity, 1 / intensity
    w = principal_priorities(m)
    _, _, cr = consistency_ratio(m, w)
    if cr >= CONSISTENCY_LIMIT:
        log.warning('%s are inconsistent (CR=%.3f)', label, cr)
    return tuple(zip(names, (float(x) for x in w))), cr


def _weights_section(names, section, label):
    if not isinstance(section, (dict, type(None))):
        raise InvalidHierarchy(f'{label}: expected an object')
    section = section or {}
    unknown_keys = set(section) - {'weights', 'judgements', 'attributes'}
    if unknown_keys:
        raise InvalidHierarchy(f'{label}: unexpected keys {sorted(unknown_keys)}')
    if 'weights' not in section and 'judgements' not in section:
        return tuple((name, 1 / len(names)) for name in names), 0.0
    if 'weights' in section:
        weights = section['weights']
        unknown = set(weights) - set(names)
        if unknown:
            raise InvalidHierarchy(f'{label}: unknown names {sorted(unknown)}')
        try:
            return tuple((name, float(weights[name])) for name in names if name in weights), 0.0
        except (TypeError, ValueError):
            raise InvalidHierarchy(f'{label}: weights must be numbers') from None
    return weights_from_judgements(list(names), section['judgements'], label)


def hierarchy_from_dict(doc):
    if not isinstance(doc, dict):
        raise InvalidHierarchy('hierarchy must be a JSON object')
    names = tuple(doc.get('criteria_order', ELEMENTS))
    criteria, cr = _weights_section(names, doc.get('criteria'), 'criteria')
    consistency = {'criteria': cr}
    subcriteria = {}
    for element, section in doc.get('subcriteria', {}).items():
        if element not in ELEMENTS:
            raise InvalidHierarchy(f'sub-criteria for unknown criterion {element!r}')
        if section is None:
            continue
        if not isinstance(section, dict):
            raise InvalidHierarchy(f'{element}: expected an object')
        attrs = tuple(section.get('attributes', ELEMENT_ATTRIBUTES[element]))
        for attribute in attrs:
            if attribute not in ELEMENT_ATTRIBUTES[element]:
                raise UnknownAttribute(f'{element} has no attribute {attribute!r}')
        subs, cr = _weights_section(attrs, section, element)
        subcriteria[element] = subs
        consistency[element] = cr
    return AhpHierarchy(criteria, subcriteria, doc.get('goal', 'select the policy'), consistency)


def default_hierarchy():
    """Equal criteria; subject ID strongly preferred over Role and Organization."""
    return hierarchy_from_dict({
        'subcriteria': {
            'subject': {'judgements': [
                {'more': 'ID', 'less': 'Role', 'intensity': 5},
                {'more': 'ID', 'less': 'Organization', 'intensity': 5},
            ]},
            'object': {},
            'environment': {},
        },
    })


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def global_priority(h, locals_):
    """Weighted sum over leaves; ``locals_`` maps (element, attribute or None) to a vector."""
    total = None
    for element, attribute, weight, sub_weight in h.leaves():
        key = (element, attribute)
        if key not in locals_:
            raise MissingLocalPriority(f'no local priority for {element}/{attribute or "*"}')
        vector = np.asarray(locals_[key], dtype=float)
        term = weight * sub_weight * vector
        total = term if total is None else total + term
    if total is None:
        raise MissingLocalPriority('hierarchy has no leaves')
    return total


@dataclass(frozen=True)
class Resolution:
    first: str
    second: str
    chosen: str
    global_priorities: tuple
    tied: bool = False
    trace: tuple = ()
    consistency: tuple = ()      # ((matrix name, CR), ...) of the hierarchy judgements

    def to_dict(self):
        return {
            'policies': [self.first, self.second],
            'chosen': self.chosen,
            'tied': self.tied,
            'global_priorities': {self.first: self.global_priorities[0],
                                  self.second: self.global_priorities[1]},
            'trace': [dict(t) for t in self.trace],
            'consistency': dict(self.consistency),
        }

    @classmethod
    def from_dict(cls, data):
        first, second = data['policies']
        priorities = data.get('global_priorities', {})
        return cls(first, second, data['chosen'],
                   (priorities.get(first, 0.0), priorities.get(second, 0.0)), bool(data.get('tied', False)),
                   consistency=tuple(data.get('consistency', {}).items()))


def resolve(p1, p2, h):
    locals_, trace = {}, []
    for element, attribute, weight, sub_weight in h.leaves():
        if attribute is None:
            m = comparison_matrix_for_element(p1, p2, element)
        else:
            m = comparison_matrix_for_attribute(p1, p2, element, attribute)
        w = principal_priorities(m)
        locals_[(element, attribute)] = w
        _, _, cr = consistency_ratio(m, w)
        trace.append({
            'criterion': element,
            'subcriterion': attribute,
            'criterion_weight': weight,
            'subcriterion_weight': sub_weight,
            'matrix': m.tolist(),
            'priorities': [float(x) for x in w],
            'consistency_ratio': cr,
        })
    g = global_priority(h, locals_)
    g1, g2 = float(g[0]), float(g[1])
    tied = abs(g1 - g2) <= TIE_TOLERANCE
    if tied:
        chosen = min(p1.policy_id, p2.policy_id)
    else:
        chosen = p1.policy_id if g1 > g2 else p2.policy_id
    log.info('conflict %s vs %s resolved for %s (%.4f / %.4f)%s',
             p1.policy_id, p2.policy_id, chosen, g1, g2, ' [tied]' if tied else '')
    return Resolution(p1.policy_id, p2.policy_id, chosen, (g1, g2), tied, tuple(trace),
                      tuple(h.consistency.items()))


def resolve_conflicts(conflicts, policies, h):
    by_id = {p.policy_id: p for p in policies}
    return [resolve(by_id[c.first], by_id[c.second], h) for c in conflicts]
