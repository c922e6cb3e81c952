# Checkpoint store package init
