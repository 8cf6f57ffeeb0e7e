"""Plain-Python reference for the ball maps and the full forward pass.

Lists of floats and the math module only; nothing here touches torch or the
package under test.
"""
import math

BALL_EPS = 1e-5


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def norm(a):
    return math.sqrt(dot(a, a))


def scale(c, a):
    return [c * x for x in a]


def add(a, b):
    return [x + y for x, y in zip(a, b)]


def project(x):
    n = norm(x)
    if n > 1 - BALL_EPS:
        return scale((1 - BALL_EPS) / n, x)
    return list(x)


def mobius(x, y):
    xy, x2, y2 = dot(x, y), dot(x, x), dot(y, y)
    den = 1 + 2 * xy + x2 * y2
    return project([((1 + 2 * xy + y2) * a + (1 - x2) * b) / den for a, b in zip(x, y)])


def exp_at(z, v):
    n = norm(v)
    if n == 0:
        return list(z)
    return mobius(z, scale(math.tanh(n / (1 - dot(z, z))) / n, v))


def log_at(z, y):
    w = mobius(scale(-1.0, z), y)
    n = norm(w)
    if n == 0:
        return [0.0] * len(z)
    return scale((1 - dot(z, z)) * math.atanh(n) / n, w)


def exp0(v):
    return project(exp_at([0.0] * len(v), v))


def log0(y):
    return log_at([0.0] * len(y), y)


def mean(vectors):
    d = len(vectors[0])
    return [sum(v[k] for v in vectors) / len(vectors) for k in range(d)]


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def matvec(W, x):
    return [dot(row, x) for row in W]


def cone_angle(x, y):
    xy, x2, y2 = dot(x, y), dot(x, x), dot(y, y)
    diff = norm([a - b for a, b in zip(x, y)])
    c = (xy * (1 + x2) - x2 * (1 + y2)) / (math.sqrt(x2) * diff * math.sqrt(1 + x2 * y2 - 2 * xy))
    return math.acos(max(-1.0, min(1.0, c)))


def half_aperture(x, K=0.1):
    n = norm(x)
    return math.asin(K * (1 - n * n) / n)


def cosine(a, b):
    na, nb = norm(a), norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return dot(a, b) / (na * nb)


def forward(params, kg_edges, train_pairs, num_items, layers, gate=None):
    """Unrolled forward pass.

    ``params``: dict of nested lists (tangent vectors / matrices).
    ``kg_edges``: (head, relation, tail) with inverses already present.
    Returns ``(users, knowledge, collab)`` final points as lists.
    """
    ent = [exp0(v) for v in params["entity_emb"]]
    col = [exp0(v) for v in params["collab_item_emb"]]
    usr = [exp0(v) for v in params["user_emb"]]
    rel = [exp0(v) for v in params["relation_emb"]]
    W1, W2 = params["gate_W1"], params["gate_W2"]
    ent_l, col_l, usr_l = [ent], [col], [usr]
    for _ in range(layers):
        fused = []
        for i in range(num_items):
            tk, tc = log0(ent[i]), log0(col[i])
            if gate is None:
                pre = add(matvec(W1, tk), matvec(W2, tc))
                g = [sigmoid(p) for p in pre]
            else:
                g = [float(gate)] * len(tk)
            fused.append(exp0([gk * a + (1 - gk) * b for gk, a, b in zip(g, tk, tc)]))

        new_ent = []
        for e in range(len(ent)):
            msgs = [
                log_at(ent[e], mobius(ent[t], rel[r]))
                for h, r, t in kg_edges
                if h == e
            ]
            new_ent.append(exp0(mean(msgs)) if msgs else ent[e])

        new_col = []
        for i in range(num_items):
            us = [u for u, j in train_pairs if j == i]
            new_col.append(exp0(mean([log0(usr[u]) for u in us])) if us else col[i])

        new_usr = []
        for u in range(len(usr)):
            its = [j for v, j in train_pairs if v == u]
            new_usr.append(exp0(mean([log0(fused[j]) for j in its])) if its else usr[u])

        ent, col, usr = new_ent, new_col, new_usr
        ent_l.append(ent)
        col_l.append(col)
        usr_l.append(usr)

    def combine(layer_list):
        out = []
        for n in range(len(layer_list[0])):
            total = [0.0] * len(layer_list[0][n])
            for layer in layer_list:
                total = add(total, log0(layer[n]))
            out.append(exp0(total))
        return out

    return combine(usr_l), combine(ent_l), combine(col_l)


def score(user, knowledge_item, collab_item):
    return cosine(user, collab_item) + cosine(user, knowledge_item)
