"""Static and dynamic exfiltration triage for ARM Linux binaries.

Submodules: binfmt (ELF parsing), disasm (ARM decode and block recovery),
graphs (FCG/ICFG/import graphs), features (76-dim vectors), classifier
(random forest), dynamics (sandbox artifact ingestion), report (breach
notification drafting), cli (command-line driver), synth (test fixtures).
"""

__version__ = "0.1.0"
