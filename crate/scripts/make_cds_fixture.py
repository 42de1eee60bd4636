"""Write fixtures/cds.fasta: synthetic coding sequences.

Each record is ATG, a run of random sense codons with mildly skewed codon
usage, then one stop codon. Lengths vary between 120 and 600 bases so the
records serve both as CDS for the DNA-protein task and as sources for the
DNA-pair task. Seeded, so reruns are byte-identical.
"""
import random
import sys

STOPS = ["TAA", "TAG", "TGA"]
SENSE = [a + b + c for a in "ACGT" for b in "ACGT" for c in "ACGT"
         if a + b + c not in STOPS]


def record(rng, weights):
    n_codons = rng.randint(38, 198)
    body = rng.choices(SENSE, weights=weights, k=n_codons)
    return "ATG" + "".join(body) + rng.choice(STOPS)


def main(out="fixtures/cds.fasta", n=1200, seed=20240601):
    rng = random.Random(seed)
    weights = [rng.uniform(0.5, 1.5) for _ in SENSE]
    seen = set()
    with open(out, "w", newline="\n") as f:
        i = 0
        while i < n:
            seq = record(rng, weights)
            if seq in seen:
                continue
            seen.add(seq)
            i += 1
            f.write(f">cds{i:04d} synthetic coding sequence\n")
            for k in range(0, len(seq), 60):
                f.write(seq[k:k + 60] + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:2])
