"""Print the embedding size of every ablation row."""

from crtreg.backbone import embedding_dim
from crtreg.evaluation import table_cells


def main():
    for tap, streams, fusion, context in table_cells():
        names = "+".join(s.value for s in sorted(streams, key=lambda s: s.value != "RGB"))
        fused = fusion.value if fusion else "-"
        print(f"{tap.value:>5}  {names:<9} {fused:<7} {context.value}  dim={embedding_dim(tap, fusion)}")


if __name__ == "__main__":
    main()
