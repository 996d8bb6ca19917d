"""Reference computations that share no code with the package."""


def oracle_constant_term(shares, prime):
    """Solve the Vandermonde system by Gauss-Jordan elimination mod p; return a_0."""
    k = len(shares)
    rows = [[pow(s.x, j, prime) for j in range(k)] + [s.y % prime] for s in shares]
    for col in range(k):
        piv = next(r for r in range(col, k) if rows[r][col] % prime)
        rows[col], rows[piv] = rows[piv], rows[col]
        inv = pow(rows[col][col], prime - 2, prime)
        rows[col] = [v * inv % prime for v in rows[col]]
        for r in range(k):
            if r != col and rows[r][col]:
                fac = rows[r][col]
                rows[r] = [(a - fac * b) % prime for a, b in zip(rows[r], rows[col])]
    return rows[0][k]
